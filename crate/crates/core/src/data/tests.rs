use super::*;
use crate::model::init_parameters;

fn small() -> MotionShapesSpec {
    MotionShapesSpec {
        frames: 3,
        height: 12,
        width: 12,
        ..MotionShapesSpec::default()
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = generate(&small(), 2, 1, 5).unwrap().to_bytes().unwrap();
    let b = generate(&small(), 2, 1, 5).unwrap().to_bytes().unwrap();
    assert_eq!(a, b);
    let c = generate(&small(), 2, 1, 6).unwrap().to_bytes().unwrap();
    assert_ne!(a, c);
}

#[test]
fn pixels_are_8_bit_values() {
    let ds = generate(&small(), 2, 1, 8).unwrap();
    for c in &ds.clips {
        assert!(c.data().iter().all(|v| v.fract() == 0.0 && (0.0..=255.0).contains(v) && v.is_sign_positive()));
    }
}

#[test]
fn right_motion_ground_truth_is_unit_flow_on_the_shapes() {
    let spec = MotionShapesSpec {
        speed: (1.0, 1.0),
        ..MotionShapesSpec::default()
    };
    let motion = draw_motion(&spec, MotionClass::Right, 3, 17);
    assert_eq!(motion.rate, 1.0);
    let gt = ground_truth_flow(&spec, &motion).unwrap();
    let mut covered = 0;
    for t in 0..spec.frames - 1 {
        for y in 0..spec.height {
            for x in 0..spec.width {
                let d = gt.at(t, y, x);
                if motion.covers(x as f64, y as f64, t as f64) {
                    assert_eq!(d, (1.0, 0.0));
                    covered += 1;
                } else {
                    assert_eq!(d, (0.0, 0.0));
                }
            }
        }
    }
    assert!(covered > 0);
    assert!(ground_truth_flow(&spec, &draw_motion(&spec, MotionClass::Expand, 3, 17)).is_none());
}

#[test]
fn noise_free_unit_translation_shifts_frames_exactly() {
    // rendering oracle: with integer speed and no noise, frame t+1 is frame t
    // moved by the ground-truth displacement
    let spec = MotionShapesSpec {
        speed: (1.0, 1.0),
        noise_sigma: 0.0,
        ..MotionShapesSpec::default()
    };
    for (class, (dx, dy)) in [(MotionClass::Right, (1i64, 0i64)), (MotionClass::Up, (0, -1))] {
        let motion = draw_motion(&spec, class, 8, 2);
        let clip = render(&spec, &motion, 8, 2).unwrap();
        for t in 0..spec.frames - 1 {
            for y in 1..spec.height as i64 - 1 {
                for x in 1..spec.width as i64 - 1 {
                    let (x2, y2) = ((x + dx) as usize, (y + dy) as usize);
                    for c in 0..3 {
                        assert_eq!(clip.at(t + 1, y2, x2, c), clip.at(t, y as usize, x as usize, c));
                    }
                }
            }
        }
    }
}

#[test]
fn frame_zero_does_not_depend_on_class() {
    let spec = MotionShapesSpec::default();
    let base = draw_motion(&spec, MotionClass::Left, 1, 4);
    let first = render(&spec, &base, 1, 4).unwrap();
    for class in MotionClass::ALL {
        let m = draw_motion(&spec, class, 1, 4);
        assert_eq!(m.shapes, base.shapes);
        let clip = render(&spec, &m, 1, 4).unwrap();
        assert_eq!(clip.frame(0), first.frame(0));
    }
}

/// Multinomial logistic regression on 8x8 average-pooled frame-0 luma.
fn frame_zero_probe(train: &Dataset, test: &Dataset) -> f64 {
    let features = |d: &Dataset, i: usize| -> Vec<f64> {
        let clip = &d.clips[i];
        let luma = &clip.luma()[0];
        let (h, w) = (clip.height(), clip.width());
        let mut f = vec![0.0; 65];
        for y in 0..h {
            for x in 0..w {
                f[(y * 8 / h) * 8 + x * 8 / w] += luma[y * w + x] / 255.0 / ((h / 8) * (w / 8)) as f64;
            }
        }
        f[64] = 1.0;
        f
    };
    let xs: Vec<Vec<f64>> = (0..train.len()).map(|i| features(train, i)).collect();
    let mut wts = vec![vec![0.0; 65]; 8];
    for _ in 0..400 {
        let mut grad = vec![vec![0.0; 65]; 8];
        for (i, x) in xs.iter().enumerate() {
            let z: Vec<f64> = wts.iter().map(|w| w.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let p = crate::tensorlab::softmax(&z);
            for k in 0..8 {
                let g = p[k] - f64::from(u8::from(train.label(i) == k));
                for j in 0..65 {
                    grad[k][j] += g * x[j] / xs.len() as f64;
                }
            }
        }
        for k in 0..8 {
            for j in 0..65 {
                wts[k][j] -= 2.0 * (grad[k][j] + 1e-3 * wts[k][j]);
            }
        }
    }
    let mut correct = 0;
    for i in 0..test.len() {
        let x = features(test, i);
        let z: Vec<f64> = wts.iter().map(|w| w.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
        correct += usize::from(crate::ssl_core::argmax(&z) == test.label(i));
    }
    correct as f64 / test.len() as f64
}

#[test]
fn frame_zero_probe_is_at_chance() {
    let spec = MotionShapesSpec {
        frames: 2,
        ..MotionShapesSpec::default()
    };
    let train = generate(&spec, 60, 0, 21).unwrap();
    let test = generate(&spec, 50, 0, 22).unwrap();
    let acc = frame_zero_probe(&train, &test);
    assert!(acc <= 1.0 / 8.0 + 0.1, "frame-0 probe accuracy {acc}");
}

#[test]
fn splits_are_balanced_and_reproducible() {
    let spec = MotionShapesSpec {
        frames: 2,
        height: 8,
        width: 8,
        ..MotionShapesSpec::default()
    };
    let d = generate(&spec, 100, 3, 1).unwrap();
    let m = make_splits(&d.manifest, 0.1, 7).unwrap();
    for class in 0..8 {
        let n = m.clips.iter().filter(|c| c.labeled && c.label == class).count();
        assert_eq!(n, 10);
    }
    assert!(m.clips.iter().all(|c| !c.labeled || c.split == Split::Train));
    assert_eq!(m.train_indices().len(), 800);
    assert_eq!(m.eval_indices().len(), 24);
    assert_eq!(make_splits(&d.manifest, 0.1, 7).unwrap(), m);
    let other = make_splits(&d.manifest, 0.1, 8).unwrap();
    assert_eq!(other.labeled_indices().len(), m.labeled_indices().len());
    assert_ne!(other.labeled_indices(), m.labeled_indices());
    let all = make_splits(&d.manifest, 1.0, 7).unwrap();
    assert_eq!(all.labeled_indices(), all.train_indices());
    assert!(make_splits(&d.manifest, 0.0, 7).is_err());
    assert!(make_splits(&d.manifest, 1.5, 7).is_err());
    // train and eval never share an id
    let train: std::collections::HashSet<u64> = m.train_indices().iter().map(|&i| m.clips[i].id).collect();
    assert!(m.eval_indices().iter().all(|&i| !train.contains(&m.clips[i].id)));
}

#[test]
fn container_round_trip_with_views() {
    let mut d = generate(&small(), 1, 1, 2).unwrap().with_splits(1.0, 0).unwrap();
    let params = FlowParams {
        iterations: 20,
        ..FlowParams::default()
    };
    let on_the_fly = d.viewsets(&params).unwrap();
    d.extract_views(&params).unwrap();
    let bytes = d.to_bytes().unwrap();
    let back = Dataset::from_bytes(&bytes).unwrap();
    assert_eq!(back, d);
    for (i, clip) in back.clips.iter().enumerate() {
        let bits = |c: &VideoClip| c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(clip), bits(&d.clips[i]));
    }
    assert_eq!(back.viewsets(&params).unwrap(), on_the_fly);
    assert_eq!(back.to_bytes().unwrap(), bytes);
}

#[test]
fn truncated_dataset_is_a_truncation_error() {
    let d = generate(&small(), 1, 0, 2).unwrap();
    let bytes = d.to_bytes().unwrap();
    let err = Dataset::from_bytes(&bytes[..bytes.len() - 8]).unwrap_err();
    assert!(matches!(err, Error::Container(ContainerError::Truncated { .. })), "{err}");
    let ckpt = checkpoint_to_bytes(&init_parameters(&ModelConfig::default(), 0).unwrap()).unwrap();
    assert!(matches!(Dataset::from_bytes(&ckpt).unwrap_err(), Error::Container(ContainerError::Manifest(_))));
}

#[test]
fn checkpoint_round_trip() {
    let cfg = ModelConfig {
        frames: 4,
        height: 8,
        width: 8,
        widths: vec![4, 6],
        ..ModelConfig::default()
    };
    let mut state = init_parameters(&cfg, 3).unwrap();
    state.step = 41;
    state.running_mean[1][2] = 0.125;
    state.running_var[0][0] = 3.5;
    let bytes = checkpoint_to_bytes(&state).unwrap();
    assert_eq!(checkpoint_from_bytes(&bytes).unwrap(), state);
    assert!(checkpoint_from_bytes(&bytes[..bytes.len() / 2]).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    assert!(generate(&small(), 0, 1, 0).is_err());
    let bad = MotionShapesSpec {
        frames: 1,
        ..small()
    };
    assert!(generate(&bad, 1, 1, 0).is_err());
    let bad = MotionShapesSpec {
        scale_rate: (0.2, 0.3),
        ..MotionShapesSpec::default()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn ground_truth_is_stored_for_translation_classes_only() {
    let d = generate(&small(), 1, 1, 4).unwrap();
    for (rec, gt) in d.manifest.clips.iter().zip(&d.ground_truth) {
        match (rec.motion.class.direction(), gt) {
            (Some((dx, dy)), Some(f)) => {
                assert_eq!((f.frames, f.height, f.width), (2, 12, 12));
                let moving: Vec<(f64, f64)> = f.data.chunks(2).map(|p| (p[0], p[1])).filter(|p| *p != (0.0, 0.0)).collect();
                assert!(!moving.is_empty());
                assert!(moving.iter().all(|&(u, v)| u == dx * rec.motion.rate && v == dy * rec.motion.rate));
            }
            (None, None) => {}
            other => panic!("clip {}: {other:?}", rec.id),
        }
    }
    let back = Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap();
    assert_eq!(back.ground_truth, d.ground_truth);
}
