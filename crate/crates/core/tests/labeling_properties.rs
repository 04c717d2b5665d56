use std::collections::BTreeMap;

use ppm_core::labeling::*;
use ppm_core::registration::{DisplacementField, WORKING_DIMS};
use ppm_core::simulator::{
    generate_phantom_pair, random_poi_layout, render_poi_image, PhantomConfig,
};
use proptest::prelude::*;

/// Percentages over non-background pixels of `classes` under each disk,
/// counted directly.
fn direct_lookup(
    classes: &AnnotationImage,
    points: &[MeasurementPoint],
    radius: f64,
) -> Vec<BTreeMap<TissueClass, f64>> {
    let (w, h) = classes.dims();
    points
        .iter()
        .map(|p| {
            let mut counts: BTreeMap<TissueClass, usize> = BTreeMap::new();
            for y in 0..h {
                for x in 0..w {
                    let d = (x as f64 - p.center[0]).hypot(y as f64 - p.center[1]);
                    if d <= radius && classes.get(x, y) != TissueClass::Background {
                        *counts.entry(classes.get(x, y)).or_default() += 1;
                    }
                }
            }
            let total: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(c, n)| (c, 100.0 * n as f64 / total as f64))
                .collect()
        })
        .collect()
}

fn transported(
    points: &[MeasurementPoint],
    annotation: &AnnotationImage,
    ddf: &DisplacementField,
    radius: f64,
) -> LabelReport {
    let disks = rasterize_disks(points, annotation.dims(), radius);
    let moved = warp_mask(&disks.mask, ddf).unwrap();
    let centers: Vec<MeasurementPoint> = points.iter().map(|p| registered_center(p, ddf)).collect();
    compute_label_percentages(&moved, annotation, &centers).unwrap()
}

fn max_difference(a: &BTreeMap<TissueClass, f64>, b: &BTreeMap<TissueClass, f64>) -> f64 {
    TissueClass::ALL
        .iter()
        .map(|c| (a.get(c).copied().unwrap_or(0.0) - b.get(c).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

fn phantom_without_holes(seed: u64) -> PhantomConfig {
    PhantomConfig {
        holes: None,
        ..PhantomConfig::random_layout(WORKING_DIMS, seed)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn render_then_extract_recovers_centers(seed in any::<u64>(), radius in 2.0..10.0f64) {
        let pair = generate_phantom_pair(&PhantomConfig::random_layout(WORKING_DIMS, seed), seed).unwrap();
        let points = random_poi_layout(&pair.specimen_classes, 6, radius, 3.0, seed);
        prop_assume!(!points.is_empty());
        let dots = render_poi_image(&pair.specimen_image, &points).unwrap();
        let found = extract_poi_centers(&dots, &pair.specimen_image).unwrap();
        prop_assert_eq!(found.len(), points.len());
        let mut expected: Vec<[f64; 2]> = points.iter().map(|p| p.center).collect();
        expected.sort_by(|a, b| a[1].total_cmp(&b[1]).then(a[0].total_cmp(&b[0])));
        for (f, e) in found.iter().zip(&expected) {
            prop_assert!((f.center[0] - e[0]).hypot(f.center[1] - e[1]) <= 0.5, "{:?} vs {:?}", f.center, e);
        }
    }

    #[test]
    fn percentages_sum_to_one_hundred(seed in any::<u64>(), radius in 1.0..12.0f64) {
        let pair = generate_phantom_pair(&PhantomConfig::random_layout(WORKING_DIMS, seed), seed).unwrap();
        let points = random_poi_layout(&pair.specimen_classes, 5, radius, 2.0, seed);
        let report = transported(&points, &pair.annotation, &pair.truth_ddf, radius);
        for entry in &report.entries {
            if entry.percentages.is_empty() {
                continue;
            }
            let sum: f64 = entry.percentages.values().sum();
            prop_assert!((sum - 100.0).abs() <= 1e-6, "{}", sum);
        }
    }
}

#[test]
fn identity_field_equals_direct_lookup() {
    for seed in 0..10 {
        let mut config = PhantomConfig::random_layout(WORKING_DIMS, seed);
        config.deformation.max_displacement = 0.0;
        let pair = generate_phantom_pair(&config, seed).unwrap();
        let points = random_poi_layout(&pair.annotation, 6, 8.0, 2.0, seed);
        let (w, h) = WORKING_DIMS;
        let report = transported(
            &points,
            &pair.annotation,
            &DisplacementField::zeros(w, h),
            8.0,
        );
        let expected = direct_lookup(&pair.annotation, &points, 8.0);
        for (entry, want) in report.entries.iter().zip(&expected) {
            assert_eq!(&entry.percentages, want, "seed {seed} poi {}", entry.poi_id);
        }
    }
}

#[test]
fn boundary_disk_splits_evenly() {
    // Columns below 40 are connective, the rest carcinoma; the boundary lies
    // between pixel 39 and pixel 40.
    let ann = AnnotationImage::from_fn(80, 60, |x, _| {
        if x < 40 {
            TissueClass::Connective
        } else {
            TissueClass::InvasiveCarcinoma
        }
    });
    for radius in [6.0, 8.0, 10.0] {
        for cy in [29.0, 29.5, 30.25] {
            let p = [MeasurementPoint::new(0, 39.5, cy, radius)];
            let mask = rasterize_disks(&p, ann.dims(), radius).mask;
            let report = compute_label_percentages(&mask, &ann, &p).unwrap();
            for class in [TissueClass::Connective, TissueClass::InvasiveCarcinoma] {
                let share = report.entries[0].percentages[&class];
                assert!(
                    (share - 50.0).abs() <= 2.0,
                    "radius {radius}: {class} {share}"
                );
            }
        }
    }
}

#[test]
fn interior_disk_is_pure() {
    let ann = AnnotationImage::from_fn(64, 48, |x, y| {
        if (x as f64 - 30.0).hypot(y as f64 - 24.0) < 15.0 {
            TissueClass::Dcis
        } else {
            TissueClass::Fat
        }
    });
    let p = [MeasurementPoint::new(0, 30.0, 24.0, 8.0)];
    let mask = rasterize_disks(&p, ann.dims(), 8.0).mask;
    let report = compute_label_percentages(&mask, &ann, &p).unwrap();
    assert_eq!(
        report.entries[0].percentages,
        BTreeMap::from([(TissueClass::Dcis, 100.0)])
    );
}

/// Nearest-neighbour transport drops or repeats single boundary pixels, and
/// one boundary row of a radius-6 disk is worth several points. The strict
/// per-location bound is checked by the acceptance suite; this pins down the
/// typical size of the error.
#[test]
fn truth_field_transport_error_is_quantization_sized() {
    for radius in [6.0, 8.0] {
        let mut diffs = Vec::new();
        for seed in 0..20 {
            let pair = generate_phantom_pair(&phantom_without_holes(seed), seed).unwrap();
            let points = random_poi_layout(&pair.specimen_classes, 6, radius, 2.0, seed);
            let report = transported(&points, &pair.annotation, &pair.truth_ddf, radius);
            let expected = direct_lookup(&pair.specimen_classes, &points, radius);
            for (entry, want) in report.entries.iter().zip(&expected) {
                diffs.push(max_difference(&entry.percentages, want));
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let within = diffs.iter().filter(|d| **d <= 3.0).count() as f64 / n;
        let worst = diffs.iter().copied().fold(0.0, f64::max);
        assert!(mean <= 1.0, "radius {radius}: mean deviation {mean}");
        assert!(within >= 0.95, "radius {radius}: {within} within 3 points");
        assert!(worst <= 10.0, "radius {radius}: worst {worst}");
    }
}

#[test]
fn smooth_transport_keeps_separated_disks_apart() {
    for seed in 0..20 {
        let pair = generate_phantom_pair(&phantom_without_holes(seed), seed).unwrap();
        let points = random_poi_layout(&pair.specimen_classes, 6, 6.0, 6.0, seed);
        let disks = rasterize_disks(&points, WORKING_DIMS, 6.0);
        let moved = warp_mask(&disks.mask, &pair.truth_ddf).unwrap();
        let report = transported(&points, &pair.annotation, &pair.truth_ddf, 6.0);
        assert!(moved.count() > 0);
        for entry in &report.entries {
            assert!(
                !entry.flags.contains(&PoiFlag::PoiLost),
                "seed {seed} poi {}",
                entry.poi_id
            );
        }
    }
}
