use proptest::prelude::*;

use super::*;
use crate::geometry::generate_anchors;
use crate::rng::Rng;
use crate::tensor::{gradcheck_many, NllPick, Tensor};

fn micro_cfg(stages: usize) -> CascadeConfig {
    CascadeConfig {
        stages,
        head_channels: 2,
        head_init_std: 0.5,
        anchor_scales: vec![1.0],
        anchor_ratios: vec![0.5, 2.0],
        ..CascadeConfig::default()
    }
}

fn random_taps(tape: &mut Tape, c: usize, s: usize, seed: u64) -> TapSet {
    let mut r = Rng::new(seed);
    let mut make = || tape.constant(Tensor::from_fn([1, c, s, s], |_| r.range(0.0, 1.0)));
    TapSet {
        f: [make(), make(), make(), make()],
    }
}

#[test]
fn defaults_match_reference_settings() {
    let c = CascadeConfig::default();
    assert_eq!(c.stages, 4);
    assert_eq!(c.r, 0.99);
    assert_eq!((c.lambda_f, c.lambda_p), (0.1, 0.9));
    assert_eq!(c.stage_batches, vec![1024, 768, 512, 256]);
    assert_eq!(c.pos_fraction, 0.5);
    c.validate().unwrap();
}

#[test]
fn config_validation() {
    let bad = CascadeConfig { lambda_f: 0.2, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = CascadeConfig { r: 0.0, ..Default::default() };
    assert!(bad.validate().is_err());
    let bad = CascadeConfig { stage_batches: vec![256, 512, 768, 1024], ..Default::default() };
    assert!(bad.validate().is_err());
    let one = CascadeConfig { stages: 1, ..Default::default() };
    assert_eq!(one.batches(), &[256]);
    assert_eq!(one.taps(), vec![4]);
    let two = CascadeConfig { stages: 2, ..Default::default() };
    assert_eq!(two.taps(), vec![3, 4]);
}

#[test]
fn assign_without_gts_is_all_background() {
    let anchors = generate_anchors(3, 3, 16, &[1.0, 2.0], &[1.0]).unwrap();
    let a = assign_labels(&anchors, &[], &CascadeConfig::default(), 48.0, 48.0);
    assert_eq!(a.count(Label::Object), 0);
    for (i, l) in a.labels.iter().enumerate() {
        let inside = anchors.boxes[i].is_inside(48.0, 48.0);
        assert_eq!(*l, if inside { Label::Background } else { Label::Ignore });
    }
}

#[test]
fn assign_exact_match_is_positive_with_zero_target() {
    let anchors = generate_anchors(3, 3, 16, &[1.0], &[1.0]).unwrap();
    let gt = anchors.boxes[4];
    let a = assign_labels(&anchors, &[gt], &CascadeConfig::default(), 48.0, 48.0);
    assert_eq!(a.labels[4], Label::Object);
    assert_eq!(a.targets[4], Some(BoxDelta::ZERO));
    assert_eq!(a.matched_gt[4], Some(0));
    assert_eq!(a.count(Label::Object), 1);
}

#[test]
fn assign_best_iou_fallback() {
    // 16×16 anchors on a 3×3 grid; a 16×16 gt shifted by a third of a cell
    // towards the next cell overlaps its best anchor with IoU exactly 0.5.
    let anchors = generate_anchors(3, 3, 16, &[1.0], &[1.0]).unwrap();
    let gt = BBox::new(16.0 + 16.0 / 3.0, 16.0, 32.0 + 16.0 / 3.0, 32.0);
    let table: Vec<f64> = anchors.boxes.iter().map(|b| iou(b, &gt)).collect();
    let best = table.iter().copied().fold(0.0, f64::max);
    assert!((best - 0.5).abs() < 1e-12);
    let a = assign_labels(&anchors, &[gt], &CascadeConfig::default(), 48.0, 48.0);
    for (i, &v) in table.iter().enumerate() {
        let want = if v == best {
            Label::Object
        } else if v < 0.3 {
            Label::Background
        } else {
            Label::Ignore
        };
        assert_eq!(a.labels[i], want, "anchor {i} iou {v}");
    }
    assert_eq!(a.count(Label::Object), 1);
}

#[test]
fn assign_ignores_border_crossing_anchors() {
    let anchors = generate_anchors(2, 2, 16, &[4.0], &[1.0]).unwrap();
    let a = assign_labels(&anchors, &[BBox::new(0.0, 0.0, 32.0, 32.0)], &CascadeConfig::default(), 32.0, 32.0);
    assert!(a.labels.iter().all(|&l| l == Label::Ignore));
}

#[test]
fn feature_chain_examples() {
    let cfg = CascadeConfig::default();
    let mut tape = Tape::new();
    let f = tape.constant(Tensor::full([1, 1, 1, 1], 2.0));
    let h = tape.constant(Tensor::full([1, 1, 1, 1], 1.0));
    assert_eq!(feature_chain(&mut tape, None, f, &cfg).unwrap(), f);
    let fused = feature_chain(&mut tape, Some(h), f, &cfg).unwrap();
    assert!((tape.value(fused).item() - 1.9).abs() <= 1e-12);
    let zero = CascadeConfig { lambda_f: 0.0, lambda_p: 1.0, ..Default::default() };
    let same = feature_chain(&mut tape, Some(h), f, &zero).unwrap();
    assert_eq!(tape.value(same), tape.value(f));
    let other = tape.constant(Tensor::zeros([1, 2, 1, 1]));
    assert!(feature_chain(&mut tape, Some(other), f, &cfg).is_err());
}

#[test]
fn score_chain_examples() {
    let cfg = CascadeConfig::default();
    let mut tape = Tape::new();
    let prev = tape.constant(Tensor::new([1, 2], vec![0.8, 0.2]).unwrap());
    let c = tape.constant(Tensor::new([1, 2], vec![0.6, 0.4]).unwrap());
    assert_eq!(score_chain(&mut tape, None, c, &cfg).unwrap(), c);
    let s = score_chain(&mut tape, Some(prev), c, &cfg).unwrap();
    let s = tape.value(s).clone();
    assert!((s.data()[0] - 0.62).abs() <= 1e-12);
    assert!((s.data()[1] - 0.38).abs() <= 1e-12);
    let s = score_chain(&mut tape, Some(c), c, &cfg).unwrap();
    for (a, b) in tape.value(s).data().iter().zip([0.6, 0.4]) {
        assert!((a - b).abs() <= 1e-15);
    }
}

#[test]
fn mu_examples() {
    let labels = vec![Label::Background, Label::Object, Label::Ignore];
    assert_eq!(mu_mask(&[], &labels, 0.99), vec![true, true, false]);
    let s1 = vec![[0.995, 0.005], [0.3, 0.7], [0.5, 0.5]];
    assert_eq!(mu_mask(std::slice::from_ref(&s1), &labels, 0.99), vec![false, true, false]);
    let easy_pos = vec![[0.1, 0.9], [0.2, 0.8], [0.5, 0.5]];
    let all = mu_masks(&[easy_pos.clone(), easy_pos.clone(), easy_pos], &[Label::Object; 3], 0.99);
    assert!(all.iter().all(|m| m.iter().all(|&v| v)));
}

#[test]
fn sample_batch_examples() {
    let mut labels = vec![Label::Object; 10];
    labels.extend(vec![Label::Background; 10]);
    let active = vec![true; 20];
    let mut rng = Rng::new(1);
    let b = sample_stage_batch(&active, &labels, 8, 0.5, &mut rng);
    assert_eq!(b.iter().filter(|&&i| i < 10).count(), 4);
    assert_eq!(b.len(), 8);

    let mut labels = vec![Label::Background; 400];
    labels[7] = Label::Object;
    let b = sample_stage_batch(&vec![true; 400], &labels, 256, 0.5, &mut Rng::new(2));
    assert_eq!(b.len(), 256);
    assert!(b.contains(&7));

    let again = sample_stage_batch(&vec![true; 400], &labels, 256, 0.5, &mut Rng::new(2));
    assert_eq!(b, again);

    let small = sample_stage_batch(&[true, false, true], &[Label::Object, Label::Background, Label::Background], 1024, 0.5, &mut Rng::new(3));
    assert_eq!(small, vec![0, 2]);
    assert!(sample_stage_batch(&[false; 3], &[Label::Object; 3], 4, 0.5, &mut Rng::new(4)).is_empty());
}

fn build(cfg: &CascadeConfig, channels: usize, seed: u64) -> (CascadeRpn, ParamStore) {
    let mut store = ParamStore::new();
    let rpn = CascadeRpn::new(cfg, channels, &mut store, &mut Rng::new(seed)).unwrap();
    (rpn, store)
}

fn zeroed(store: &ParamStore) -> ParamStore {
    let mut z = store.clone();
    for id in store.ids() {
        z.value_mut(id).data_mut().fill(0.0);
    }
    z
}

#[test]
fn zero_init_heads() {
    let cfg = CascadeConfig::default();
    let (rpn, store) = build(&cfg, 4, 1);
    let store = zeroed(&store);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let taps = random_taps(&mut tape, 4, 3, 2);
    let out = rpn.forward(&mut tape, &p, &taps).unwrap();
    assert_eq!(out.stages.len(), 4);
    for s in &out.stages {
        assert!(tape.value(s.c).data().iter().all(|&v| v == 0.5));
    }
    assert_eq!(tape.shape(out.deltas), &[3 * 3 * 9, 4]);
    assert!(tape.value(out.deltas).data().iter().all(|&v| v == 0.0));
}

#[test]
fn head_scores_are_distributions() {
    let cfg = CascadeConfig { head_init_std: 1.0, ..Default::default() };
    let (rpn, store) = build(&cfg, 4, 3);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let taps = random_taps(&mut tape, 4, 3, 4);
    let out = rpn.forward(&mut tape, &p, &taps).unwrap();
    for s in &out.stages {
        for row in score_values(&tape, s.c) {
            assert!((row[0] + row[1] - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn gradcheck_heads_on_micro_grid() {
    let cfg = micro_cfg(2);
    let (rpn, store) = build(&cfg, 2, 5);
    let mut r = Rng::new(6);
    let tap_points: Vec<Tensor> = (0..4)
        .map(|_| Tensor::from_fn([1, 2, 2, 2], |_| r.range(0.0, 1.0)))
        .collect();
    let mut points = tap_points;
    points.extend(store.named_tensors().into_iter().map(|(_, t)| t));
    let err = gradcheck_many(
        |tape, vars| {
            let taps = TapSet { f: [vars[0], vars[1], vars[2], vars[3]] };
            let p = Bound::from_vars(vars[4..].to_vec());
            let out = rpn.forward(tape, &p, &taps)?;
            let mut total = None;
            for st in &out.stages {
                let picks = (0..8).map(|row| NllPick { row, class: row % 2, weight: 0.25 }).collect();
                let l = tape.nll(st.s, picks)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add_scaled(t, 1.0, l, 1.0)?,
                });
            }
            let picks = (0..8)
                .map(|row| crate::tensor::SmoothL1Pick { row, col: 0, target: [0.1, -0.2, 0.3, 0.0], weight: 1.0 })
                .collect();
            let reg = tape.smooth_l1(out.deltas, picks)?;
            tape.add_scaled(total.unwrap(), 1.0, reg, 1.0)
        },
        &points,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn propose_examples() {
    let cfg = CascadeConfig::default();
    let anchors = generate_anchors(1, 2, 16, &[1.0], &[1.0]).unwrap();
    let deltas = vec![BoxDelta::ZERO; 2];
    let rejected = vec![vec![[1.0 - 1e-4, 1e-4]; 2]];
    assert!(propose(&rejected, &deltas, &anchors, &cfg, 32.0, 16.0).unwrap().is_empty());

    let single = generate_anchors(1, 1, 16, &[1.0], &[1.0]).unwrap();
    let p = propose(&[vec![[0.1, 0.9]]], &[BoxDelta::ZERO], &single, &cfg, 16.0, 16.0).unwrap();
    assert_eq!(p.boxes, vec![single.boxes[0]]);
    assert_eq!(p.scores, vec![0.9]);

    let mut dup = single.clone();
    dup.boxes.push(single.boxes[0]);
    let p = propose(&[vec![[0.1, 0.9], [0.2, 0.8]]], &deltas, &dup, &cfg, 16.0, 16.0).unwrap();
    assert_eq!(p.source_anchor, vec![0]);
}

#[test]
fn propose_rejects_at_any_stage_and_truncates() {
    let cfg = CascadeConfig { proposal_topk: 1, ..Default::default() };
    let anchors = generate_anchors(1, 3, 16, &[1.0], &[1.0]).unwrap();
    let s1 = vec![[0.995, 0.005], [0.5, 0.5], [0.4, 0.6]];
    let s2 = vec![[0.5, 0.5], [0.5, 0.5], [0.4, 0.6]];
    let p = propose(&[s1, s2], &[BoxDelta::ZERO; 3], &anchors, &cfg, 48.0, 16.0).unwrap();
    assert_eq!(p.source_anchor, vec![2]);
}

fn random_run(seed: u64, cfg: &CascadeConfig, std: f64) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>, Vec<Label>) {
    let (rpn, store) = build(&CascadeConfig { head_init_std: std, ..cfg.clone() }, 4, seed);
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let taps = random_taps(&mut tape, 4, 4, seed + 100);
    let out = rpn.forward(&mut tape, &p, &taps).unwrap();
    let mut r = Rng::new(seed + 200);
    let labels = (0..4 * 4 * 9)
        .map(|_| match r.below(3) {
            0 => Label::Object,
            1 => Label::Background,
            _ => Label::Ignore,
        })
        .collect();
    (out.chained_scores(&tape), out.raw_scores(&tape), labels)
}

#[test]
fn lambda_zero_degenerates_to_raw_heads() {
    let cfg = CascadeConfig { lambda_f: 0.0, lambda_p: 1.0, ..Default::default() };
    for seed in 0..3 {
        let (rpn, store) = build(&cfg, 4, seed);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let taps = random_taps(&mut tape, 4, 3, seed);
        let out = rpn.forward(&mut tape, &p, &taps).unwrap();
        for (st, tap) in out.stages.iter().zip(taps.f) {
            assert_eq!(tape.value(st.s), tape.value(st.c));
            assert_eq!(tape.value(st.h), tape.value(tap));
        }
    }
}

#[test]
fn rejection_follows_chained_not_raw_scores() {
    // Stage 1 raw and chained scores coincide; construct stage 2 where the
    // chained background score stays under r though the raw one crosses it.
    let labels = vec![Label::Background];
    let c2 = [0.999, 0.001];
    let b2 = 0.1 * 0.5 + 0.9 * c2[0];
    let s = vec![vec![[0.5, 0.5]], vec![[b2, 1.0 - b2]]];
    assert!(c2[0] >= 0.99);
    assert!(s[1][0][0] < 0.99);
    let mu3 = mu_mask(&s, &labels, 0.99);
    assert_eq!(mu3, vec![true]);
    let raw = vec![vec![[0.5, 0.5]], vec![c2]];
    assert_eq!(mu_mask(&raw, &labels, 0.99), vec![false]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn active_sets_shrink_and_scores_stay_on_simplex(seed in 0u64..10_000) {
        let (s, _, labels) = random_run(seed, &CascadeConfig { r: 0.6, ..Default::default() }, 2.0);
        for stage in &s {
            for row in stage {
                prop_assert!(row[0] >= 0.0 && row[1] >= 0.0);
                prop_assert!((row[0] + row[1] - 1.0).abs() <= 1e-9);
            }
        }
        let mu = mu_masks(&s, &labels, 0.6);
        for t in 1..mu.len() {
            for a in 0..labels.len() {
                prop_assert!(!mu[t][a] || mu[t - 1][a]);
            }
        }
        let inf = inference_active(&s, 0.6);
        for t in 1..inf.len() {
            for a in 0..labels.len() {
                prop_assert!(!inf[t][a] || inf[t - 1][a]);
            }
        }
    }

    #[test]
    fn unreachable_threshold_never_rejects(seed in 0u64..10_000) {
        let (s, _, labels) = random_run(seed, &CascadeConfig { r: 1.0, ..Default::default() }, 0.3);
        prop_assert!(s.iter().flatten().all(|row| row[0] < 1.0 && row[1] < 1.0));
        let mu = mu_masks(&s, &labels, 1.0);
        for (a, l) in labels.iter().enumerate() {
            for m in &mu {
                prop_assert_eq!(m[a], *l != Label::Ignore);
            }
        }
    }
}
