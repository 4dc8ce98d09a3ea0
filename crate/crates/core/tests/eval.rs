use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vita_core::dataio::{roi_samples, RoISample};
use vita_core::eval::{
    aggregate, derive_visible, evaluate, iou, score_predictions, sweep_csv, threshold_mask, BinaryPrediction, EvalOptions, SweepRow,
    SWEEP_CSV_HEADER,
};
use vita_core::model::{checkpoint_bytes, HeadKind, Model, ModelConfig};
use vita_core::raster::Mask;
use vita_core::scenegen::{generate_scenes, occlusion_bin, OcclusionBin, SceneConfig};
use vita_core::Error;

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
    Mask::from_fn(w, h, |_, _| rng.random_bool(p))
}

fn samples(n_scenes: usize, side: usize) -> Vec<RoISample> {
    let scenes = generate_scenes(&SceneConfig {
        n_scenes,
        scene_side: 128,
        seed: 31,
        target_mix: None,
        ..SceneConfig::default()
    })
    .unwrap();
    roi_samples(&scenes, None, side).unwrap()
}

fn gt_prediction(s: &RoISample, dual: bool) -> BinaryPrediction {
    BinaryPrediction {
        amodal: s.targets.amodal.clone(),
        occluded: dual.then(|| s.targets.occluded.clone()),
    }
}

#[test]
fn iou_examples() {
    let a = Mask::from_fn(2, 2, |x, y| x == 0 && y <= 1);
    let b = Mask::from_fn(2, 2, |_, y| y == 1);
    // a = {(0,0),(0,1)}, b = {(0,1),(1,1)}: one shared pixel of three.
    assert_eq!(iou(&a, &b).unwrap(), 1.0 / 3.0);
    assert_eq!(iou(&a, &a).unwrap(), 1.0);
    let c = Mask::from_fn(2, 2, |x, y| x == 1 && y == 0);
    assert_eq!(iou(&a, &c).unwrap(), 0.0);
    let e = Mask::empty(2, 2);
    assert_eq!(iou(&e, &e).unwrap(), 1.0);
    assert_eq!(iou(&a, &e).unwrap(), 0.0);
    assert!(matches!(iou(&a, &Mask::empty(3, 2)), Err(Error::Contract(_))));
}

#[test]
fn iou_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let a = random_mask(&mut rng, 9, 7, 0.3);
        let b = random_mask(&mut rng, 9, 7, 0.3);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
    }
}

#[test]
fn threshold_uses_greater_or_equal() {
    assert!(threshold_mask(&[0.6f32; 4], 2, 2, 0.5).unwrap().data.iter().all(|&b| b));
    assert!(threshold_mask(&[0.4f32; 4], 2, 2, 0.5).unwrap().is_empty());
    assert!(threshold_mask(&[0.5f64; 4], 2, 2, 0.5).unwrap().data.iter().all(|&b| b));
    assert!(matches!(threshold_mask(&[0.5f64; 3], 2, 2, 0.5), Err(Error::Contract(_))));
}

#[test]
fn derived_visible_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (a, o, v) = (random_mask(&mut rng, 6, 5, 0.5), random_mask(&mut rng, 6, 5, 0.3), random_mask(&mut rng, 6, 5, 0.4));
        let dual = BinaryPrediction {
            amodal: a.clone(),
            occluded: Some(o.clone()),
        };
        let single = BinaryPrediction {
            amodal: a.clone(),
            occluded: None,
        };
        let dv = derive_visible(&dual, &v).unwrap();
        let sv = derive_visible(&single, &v).unwrap();
        for i in 0..30 {
            assert_eq!(dv.data[i], a.data[i] && !o.data[i]);
            assert_eq!(sv.data[i], a.data[i] && v.data[i]);
        }
    }
    let a = Mask::from_fn(4, 4, |x, _| x < 3);
    let dual = BinaryPrediction {
        amodal: a.clone(),
        occluded: Some(Mask::empty(4, 4)),
    };
    assert_eq!(derive_visible(&dual, &Mask::empty(4, 4)).unwrap(), a);
}

#[test]
fn oracle_predictions_score_perfectly() {
    let s = samples(3, 16);
    for dual in [true, false] {
        let preds: Vec<_> = s.iter().map(|x| gt_prediction(x, dual)).collect();
        let m = aggregate(&score_predictions(&s, &preds).unwrap()).unwrap();
        assert_eq!((m.miou_a, m.miou_v, m.miou_o), (1.0, 1.0, 1.0));
        assert_eq!(m.n_samples, s.len());
    }
}

#[test]
fn means_match_brute_force_recomputation() {
    let s: Vec<_> = samples(4, 16).into_iter().take(20).collect();
    assert_eq!(s.len(), 20);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let preds: Vec<_> = s
        .iter()
        .map(|_| BinaryPrediction {
            amodal: random_mask(&mut rng, 16, 16, 0.5),
            occluded: Some(random_mask(&mut rng, 16, 16, 0.2)),
        })
        .collect();
    let m = aggregate(&score_predictions(&s, &preds).unwrap()).unwrap();

    let pix_iou = |p: &Mask, g: &Mask| {
        let (mut i, mut u) = (0u32, 0u32);
        for k in 0..p.data.len() {
            i += (p.data[k] & g.data[k]) as u32;
            u += (p.data[k] | g.data[k]) as u32;
        }
        if u == 0 {
            1.0
        } else {
            i as f64 / u as f64
        }
    };
    let (mut sa, mut sv, mut so) = (0.0, 0.0, 0.0);
    let mut bins = [(0usize, 0.0f64); 3];
    for (x, p) in s.iter().zip(&preds) {
        let o = p.occluded.as_ref().unwrap();
        let vis = Mask::from_fn(16, 16, |i, j| p.amodal.get(i, j) && !o.get(i, j));
        sa += pix_iou(&p.amodal, &x.targets.amodal);
        sv += pix_iou(&vis, &x.targets.visible);
        let io = pix_iou(o, &x.targets.occluded);
        so += io;
        let b = occlusion_bin(x.occ_rate).unwrap().index();
        bins[b].0 += 1;
        bins[b].1 += io;
    }
    assert_eq!(m.miou_a, sa / 20.0);
    assert_eq!(m.miou_v, sv / 20.0);
    assert_eq!(m.miou_o, so / 20.0);
    for (k, b) in m.per_bin.iter().enumerate() {
        assert_eq!(b.bin, OcclusionBin::ALL[k]);
        assert_eq!(b.count, bins[k].0);
        assert_eq!(b.miou_o, (bins[k].0 > 0).then(|| bins[k].1 / bins[k].0 as f64));
    }
    assert_eq!(m.per_bin.iter().map(|b| b.count).sum::<usize>(), 20);
}

#[test]
fn evaluate_reports_and_leaves_model_untouched() {
    let s: Vec<_> = samples(2, 64).into_iter().take(6).collect();
    let model = Model::<f32>::new(ModelConfig::toy(HeadKind::Dual)).unwrap();
    let before = checkpoint_bytes(&model);
    let rep = evaluate(&model, &s, &EvalOptions::default()).unwrap();
    assert_eq!(checkpoint_bytes(&model), before);
    assert_eq!(rep.metrics.n_samples, 6);
    assert_eq!(rep.timing.timed, 6);
    assert!(rep.timing.t_inf_ms > 0.0 && rep.timing.t_inf_std_ms >= 0.0);
    assert_eq!(rep.config_fingerprint, model.config().fingerprint());
    for v in [rep.metrics.miou_a, rep.metrics.miou_v, rep.metrics.miou_o] {
        assert!((0.0..=1.0).contains(&v));
    }
    let json: serde_json::Value = serde_json::from_str(&rep.to_json().unwrap()).unwrap();
    for k in ["miou_a", "miou_v", "miou_o", "per_bin", "t_inf_ms", "n_samples", "config_fingerprint"] {
        assert!(json.get(k).is_some(), "missing {k}");
    }
    // Metrics do not depend on the timing order.
    let other = evaluate(
        &model,
        &s,
        &EvalOptions {
            seed: 99,
            ..EvalOptions::default()
        },
    )
    .unwrap();
    assert_eq!(other.metrics, rep.metrics);
    assert!(matches!(evaluate(&model, &[], &EvalOptions::default()), Err(Error::Contract(_))));
    let wrong_side = samples(1, 32);
    assert!(matches!(evaluate(&model, &wrong_side, &EvalOptions::default()), Err(Error::Contract(_))));
}

#[test]
fn sweep_csv_layout() {
    let rows = vec![
        SweepRow {
            lambda_o: 0.0,
            miou_a: 0.5,
            miou_v: 0.25,
            miou_o: 0.125,
        },
        SweepRow {
            lambda_o: 0.25,
            miou_a: 1.0,
            miou_v: 1.0,
            miou_o: 0.75,
        },
    ];
    let csv = sweep_csv(&rows);
    assert_eq!(SWEEP_CSV_HEADER, "lambda_o,miou_a,miou_v,miou_o");
    assert_eq!(csv, "lambda_o,miou_a,miou_v,miou_o\n0,0.5,0.25,0.125\n0.25,1,1,0.75\n");
}
