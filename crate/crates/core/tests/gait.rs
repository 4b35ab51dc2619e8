use gaitkit::gait::*;
use gaitkit::refine::{mean_joint_error, refine_sequence, RefineConfig};
use gaitkit::synth::{add_noise, generate, project_sequence, CameraRig, GaitParams};
use gaitkit::{Dims, Keypoint, PoseSequence, SkeletonTopology};
use proptest::prelude::*;

/// Counts window starts by walking them one by one.
fn enumerate_starts(n: usize, w: usize, s: usize) -> usize {
    if w == 0 || s == 0 {
        return 0;
    }
    let mut count = 0;
    let mut start = 0;
    while start + w <= n {
        count += 1;
        start += s;
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn window_count_matches_enumeration(n in 0usize..5000, w in 0usize..400, s in 0usize..200) {
        let spec = WindowSpec { window_frames: w, stride_frames: s };
        prop_assert_eq!(spec.count(n), enumerate_starts(n, w, s));
    }
}

#[test]
fn make_windows_matches_count_on_small_inputs() {
    let topo = SkeletonTopology::point_set("p", 2).unwrap();
    for n in 0..40 {
        let seq = PoseSequence::new(
            topo.clone(),
            Dims::Two,
            30.0,
            (0..n)
                .map(|t| vec![Keypoint::new2(t as f64, 0.0, 1.0); 2])
                .collect(),
        );
        for w in 1..12 {
            for s in 1..8 {
                let spec = WindowSpec {
                    window_frames: w,
                    stride_frames: s,
                };
                let windows = make_windows(&seq, &spec);
                assert_eq!(windows.len(), spec.count(n));
                for (i, win) in windows.iter().enumerate() {
                    assert_eq!(win.start, i * s);
                    assert_eq!(win.frames.len(), w);
                    assert_eq!(win.frames[0][0].coords[0], (i * s) as f64);
                }
            }
        }
    }
}

#[test]
fn synthetic_clip_through_the_whole_pipeline() {
    let (clean, truth) = generate(&GaitParams::default()).unwrap();
    let cam = CameraRig::default().intrinsics;
    let obs = project_sequence(&clean, &cam).unwrap();
    let noisy = add_noise(&clean, 0.02, 5).unwrap();
    let refined = refine_sequence(&noisy, &obs, &cam, &RefineConfig::default()).unwrap();
    assert!(mean_joint_error(&refined.refined, &clean) < mean_joint_error(&noisy, &clean));

    let metrics = compute_metrics(&refined.refined).unwrap();
    let cadence = metrics.cadence_steps_per_min.unwrap();
    assert!((cadence - truth.cadence_steps_per_min).abs() <= 2.0);

    let trial = classify_trial(
        &refined.refined,
        &WindowSpec::default(),
        &ClassifierWeights::bundled(Dims::Three),
    )
    .unwrap()
    .unwrap();
    assert_eq!(trial.per_window.len(), 9);
    assert!(trial.trial_class < 3);

    let json = serde_json::to_value(&metrics).unwrap();
    assert!(json["cadence_steps_per_min"].is_number());
    assert!(json["heel_strike_times_left"].is_array());
}

#[test]
fn short_clip_has_no_windows_but_still_has_metrics() {
    let (seq, _) = generate(&GaitParams {
        duration_s: 1.4,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(seq.len(), 84);
    let trial = classify_trial(
        &seq,
        &WindowSpec::default(),
        &ClassifierWeights::bundled(Dims::Three),
    )
    .unwrap();
    assert!(trial.is_none());
    let m = compute_metrics(&seq).unwrap();
    assert!(m.heel_strike_times_left.len() + m.heel_strike_times_right.len() >= 2);
}
