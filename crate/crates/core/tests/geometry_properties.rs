use nalgebra::Vector3;
use ppm_core::geometry::*;
use ppm_core::simulator::{
    generate_checkerboard_correspondences, generate_depth_scene, ScenarioConfig,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn angle() -> impl Strategy<Value = f64> {
    -std::f64::consts::PI..std::f64::consts::PI
}

fn transform() -> impl Strategy<Value = RigidTransform> {
    (
        angle(),
        angle(),
        angle(),
        prop::array::uniform3(-100.0..100.0f64),
    )
        .prop_map(|(r, p, y, t)| RigidTransform::from_euler(r, p, y, Vector3::from(t)))
}

fn point() -> impl Strategy<Value = Point3> {
    prop::array::uniform3(-500.0..500.0f64).prop_map(|[x, y, z]| Point3::new(x, y, z))
}

fn board_pairs(truth: &RigidTransform, seed: u64) -> CorrespondenceSet {
    let scenario = ScenarioConfig {
        seed,
        transform_truth: *truth,
        ..Default::default()
    };
    generate_checkerboard_correspondences(&scenario).unwrap().0
}

fn perturb(t: &RigidTransform, rng: &mut ChaCha8Rng, scale: f64) -> RigidTransform {
    let mut s = || rng.random_range(-scale..scale);
    let delta = RigidTransform::from_euler(s(), s(), s(), Vector3::new(s(), s(), s()) * 10.0);
    delta.compose(t)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn map_point_preserves_distances(t in transform(), p in point(), q in point()) {
        let d = p.distance(&q);
        let mapped = map_point(&t, p).distance(&map_point(&t, q));
        prop_assert!((mapped - d).abs() <= 1e-9 * d.max(1.0), "{mapped} vs {d}");
    }

    #[test]
    fn plane_fit_is_exact_on_noise_free_samples(
        a in -0.5..0.5f64,
        b in -0.5..0.5f64,
        c in -5000.0..5000.0f64,
    ) {
        let frame = DepthFrame::from_fn(40, 30, 1.0, |x, y| -(a * x + b * y + c)).unwrap();
        let fit = fit_base_plane(&frame.points()).unwrap();
        prop_assert!(fit.residual <= 1e-9, "residual {}", fit.residual);
        let corrected = correct_depth(&frame, &fit.plane);
        for z in corrected.depths() {
            prop_assert!(z.abs() <= 1e-9, "corrected depth {z}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn estimator_is_left_invariant(truth in transform(), q in transform(), seed in any::<u64>()) {
        let set = board_pairs(&truth, seed);
        let original = estimate_projector_transform(&set).unwrap().transform;
        let moved = CorrespondenceSet::new(
            set.pairs
                .iter()
                .map(|c| Correspondence { camera: q.apply(&c.camera), projector: c.projector })
                .collect(),
        );
        let estimate = estimate_projector_transform(&moved).unwrap().transform;
        let expected = original.compose(&q.inverse());
        prop_assert!((estimate.rotation() - expected.rotation()).abs().max() <= 1e-6);
        prop_assert!((estimate.translation() - expected.translation()).abs().max() <= 1e-6);
    }

    #[test]
    fn estimate_beats_random_rigid_perturbations(truth in transform(), seed in any::<u64>()) {
        let scenario = ScenarioConfig {
            seed,
            transform_truth: truth,
            corner_noise_sigma: 0.5,
            ..Default::default()
        };
        let set = generate_checkerboard_correspondences(&scenario).unwrap().0;
        let best = estimate_projector_transform(&set).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..1000 {
            let scale = [1e-1, 1e-2, 1e-3, 1e-5][i % 4];
            let other = perturb(&best.transform, &mut rng, scale);
            let rmse = mapping_rmse(&other, &set).unwrap();
            prop_assert!(best.rmse <= rmse + 1e-12, "perturbation {i} reached {rmse} < {}", best.rmse);
        }
    }
}

#[test]
fn plane_recovery_under_depth_noise() {
    // Slopes within 3·σ/√n. The intercept is measured far from the sample
    // centroid, so it is held to three of its own standard errors instead.
    let sigma = 1.0;
    let truth = PlaneModel::new(0.01, -0.02, -500.0);
    let n = 10_000;
    let noise = Normal::new(0.0, sigma).unwrap();
    let bound = 3.0 * sigma / (n as f64).sqrt();
    let mut intercept_misses = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<Point3> = (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..160.0);
                let y = rng.random_range(0.0..120.0);
                Point3::new(x, y, truth.depth_at(x, y) + noise.sample(&mut rng))
            })
            .collect();
        let fit = fit_base_plane(&samples).unwrap().plane;
        assert!(
            (fit.a - truth.a).abs() <= bound,
            "seed {seed}: a = {}",
            fit.a
        );
        assert!(
            (fit.b - truth.b).abs() <= bound,
            "seed {seed}: b = {}",
            fit.b
        );

        let nf = n as f64;
        let mean = |f: &dyn Fn(&Point3) -> f64| samples.iter().map(f).sum::<f64>() / nf;
        let (mx, my) = (mean(&|p| p.x), mean(&|p| p.y));
        let sxx = mean(&|p| (p.x - mx).powi(2));
        let syy = mean(&|p| (p.y - my).powi(2));
        let sxy = mean(&|p| (p.x - mx) * (p.y - my));
        let det = sxx * syy - sxy * sxy;
        let leverage = (syy * mx * mx - 2.0 * sxy * mx * my + sxx * my * my) / det;
        let c_error = sigma * ((1.0 + leverage) / nf).sqrt();
        if (fit.c - truth.c).abs() > 3.0 * c_error {
            intercept_misses += 1;
        }
    }
    assert!(
        intercept_misses <= 2,
        "{intercept_misses} intercepts outside 3 standard errors"
    );
}

#[test]
fn averaging_reduces_noise_by_root_frame_count() {
    let scenario = ScenarioConfig {
        plane_truth: PlaneModel::new(0.0, 0.0, -500.0),
        depth_noise_sigma: 2.0,
        frame_count: 100,
        frame_dims: (64, 48),
        ..Default::default()
    };
    let (frames, _) = generate_depth_scene(&scenario).unwrap();
    let mean = average_depth_frames(&frames).unwrap();
    let d = mean.depths();
    let m = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|z| (z - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
    assert!((m - 500.0).abs() < 0.05, "mean {m}");
    assert!((0.15..=0.25).contains(&sd), "sd {sd}");
}

#[test]
fn depth_scene_round_trip_through_calibration() {
    let scenario = ScenarioConfig {
        depth_noise_sigma: 0.0,
        ..Default::default()
    };
    let (frames, truth) = generate_depth_scene(&scenario).unwrap();
    let fit = calibrate_base_plane(&frames, 5000, 1).unwrap().plane;
    assert!((fit.a - truth.a).abs() < 1e-9);
    assert!((fit.b - truth.b).abs() < 1e-9);
    assert!((fit.c - truth.c).abs() < 1e-9);
}

#[test]
fn noisy_calibration_stays_in_the_reported_regime() {
    for (sigma, limit) in [(0.05, 0.15), (0.2, 0.6)] {
        let mut within = 0;
        for seed in 0..100 {
            let scenario = ScenarioConfig {
                seed,
                corner_noise_sigma: sigma,
                ..Default::default()
            };
            let (set, _) = generate_checkerboard_correspondences(&scenario).unwrap();
            if estimate_projector_transform(&set).unwrap().rmse <= limit {
                within += 1;
            }
        }
        assert!(
            within >= 90,
            "sigma {sigma}: {within}/100 within {limit} mm"
        );
    }
}

#[test]
fn nelder_mead_backend_matches_closed_form() {
    for seed in 0..10 {
        let truth =
            RigidTransform::from_euler(0.1 * seed as f64, -0.05, 0.3, Vector3::new(5.0, -3.0, 2.0));
        let set = board_pairs(&truth, seed);
        let closed = estimate_projector_transform(&set).unwrap();
        let refined =
            estimate_projector_transform_with(&set, SolverBackend::ProcrustesRefined).unwrap();
        assert!(closed.rmse < 1e-6);
        assert!(
            (closed.transform.rotation() - refined.transform.rotation())
                .abs()
                .max()
                < 1e-6
        );
        assert!(
            (closed.transform.translation() - refined.transform.translation())
                .abs()
                .max()
                < 1e-6
        );
    }
}
