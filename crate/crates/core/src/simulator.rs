//! Deterministic synthetic scenes with known ground truth.
//!
//! Every generator draws from a single ChaCha stream seeded by the caller,
//! so identical `(config, seed)` pairs give bit-identical output.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    Correspondence, CorrespondenceSet, DepthFrame, PlaneModel, Point3, RigidTransform,
};
use crate::labeling::{disk_pixels, AnnotationImage, MeasurementPoint, TissueClass};
use crate::registration::{DisplacementField, GrayImage, RgbImage, WORKING_DIMS};

/// Interior corners of a 4×5 checkerboard: a 3×4 grid.
pub const BOARD_CORNER_ROWS: usize = 3;
pub const BOARD_CORNER_COLS: usize = 4;
pub const CORNERS_PER_BOARD: usize = BOARD_CORNER_ROWS * BOARD_CORNER_COLS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub plane_truth: PlaneModel,
    pub depth_noise_sigma: f64,
    pub frame_dims: (usize, usize),
    pub pixel_pitch_mm: f64,
    pub frame_count: usize,
    /// Heights of the checkerboard planes above the base plane, mm.
    pub board_heights: Vec<f64>,
    pub board_square_mm: f64,
    pub corner_noise_sigma: f64,
    pub transform_truth: RigidTransform,
    pub phantom: PhantomConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            plane_truth: PlaneModel::new(0.01, -0.02, -500.0),
            depth_noise_sigma: 1.0,
            frame_dims: (160, 120),
            pixel_pitch_mm: 1.0,
            frame_count: 10,
            board_heights: vec![0.0, 20.0, 40.0, 60.0, 80.0],
            board_square_mm: 20.0,
            corner_noise_sigma: 0.0,
            transform_truth: RigidTransform::from_euler(
                0.02,
                -0.03,
                10f64.to_radians(),
                Vector3::new(5.0, -3.0, 2.0),
            ),
            phantom: PhantomConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.depth_noise_sigma >= 0.0 && self.corner_noise_sigma >= 0.0) {
            return bad("noise sigmas must be >= 0".into());
        }
        if self.board_heights.is_empty() {
            return bad("board_heights: need at least one board".into());
        }
        if self.frame_dims.0 < 16 || self.frame_dims.1 < 16 {
            return bad(format!(
                "frame_dims: must be at least 16x16, got {:?}",
                self.frame_dims
            ));
        }
        if self.pixel_pitch_mm.is_nan() || self.pixel_pitch_mm <= 0.0 {
            return bad("pixel_pitch_mm: must be > 0".into());
        }
        if !self.plane_truth.is_finite() {
            return bad("plane_truth: coefficients must be finite".into());
        }
        if self.frame_count == 0 {
            return bad("frame_count: must be >= 1".into());
        }
        self.phantom.validate()
    }
}

/// Noisy depth frames of the tilted base plane `z = −(a·x + b·y + c)`.
pub fn generate_depth_scene(config: &ScenarioConfig) -> Result<(Vec<DepthFrame>, PlaneModel)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise = normal(config.depth_noise_sigma);
    let plane = config.plane_truth;
    let (w, h) = config.frame_dims;
    let frames = (0..config.frame_count)
        .map(|_| {
            DepthFrame::from_fn(w, h, config.pixel_pitch_mm, |x, y| {
                plane.depth_at(x, y) + sample(&noise, &mut rng)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((frames, plane))
}

/// Interior checkerboard corners at each board height, paired with their
/// projector-space images under `transform_truth` plus isotropic corner noise.
pub fn generate_checkerboard_correspondences(
    config: &ScenarioConfig,
) -> Result<(CorrespondenceSet, RigidTransform)> {
    config.validate()?;
    // Offset the stream so the boards do not reuse the depth-noise draws.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = normal(config.corner_noise_sigma);
    let (w, h) = config.frame_dims;
    let (cx, cy) = (
        0.5 * (w - 1) as f64 * config.pixel_pitch_mm,
        0.5 * (h - 1) as f64 * config.pixel_pitch_mm,
    );
    let sq = config.board_square_mm;
    let truth = config.transform_truth;
    let mut pairs = Vec::with_capacity(config.board_heights.len() * CORNERS_PER_BOARD);
    for &height in &config.board_heights {
        let angle: f64 = rng.random_range(-0.3..0.3);
        let (ox, oy) = (
            rng.random_range(-0.5..0.5) * sq,
            rng.random_range(-0.5..0.5) * sq,
        );
        let (s, c) = angle.sin_cos();
        for r in 0..BOARD_CORNER_ROWS {
            for k in 0..BOARD_CORNER_COLS {
                let u = (k as f64 - 0.5 * (BOARD_CORNER_COLS - 1) as f64) * sq;
                let v = (r as f64 - 0.5 * (BOARD_CORNER_ROWS - 1) as f64) * sq;
                let x = cx + ox + c * u - s * v;
                let y = cy + oy + s * u + c * v;
                let camera = Point3::new(x, y, config.plane_truth.depth_at(x, y) - height);
                let mapped = truth.apply(&camera);
                let projector = Point3::new(
                    mapped.x + sample(&noise, &mut rng),
                    mapped.y + sample(&noise, &mut rng),
                    mapped.z + sample(&noise, &mut rng),
                );
                pairs.push(Correspondence { camera, projector });
            }
        }
    }
    Ok((CorrespondenceSet::new(pairs), truth))
}

fn normal(sigma: f64) -> Option<Normal<f64>> {
    (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"))
}

fn sample(dist: &Option<Normal<f64>>, rng: &mut ChaCha8Rng) -> f64 {
    dist.as_ref().map_or(0.0, |d| d.sample(rng))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueRegion {
    pub class: TissueClass,
    /// Closed polygon, `(x, y)` pixel vertices.
    pub polygon: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationConfig {
    /// Distance between displacement control points, px.
    pub control_spacing: f64,
    /// Per-component bound of the random control displacements, px.
    pub max_displacement: f64,
    /// Constant displacement added to every control point, px.
    pub translation: [f64; 2],
}

impl Default for DeformationConfig {
    fn default() -> Self {
        Self {
            control_spacing: 48.0,
            max_displacement: 8.0,
            translation: [0.0, 0.0],
        }
    }
}

/// Per-class rendering colours: RGB for the specimen snapshot, gray level
/// for the histology section. Indexed like [`TissueClass::ALL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityMap {
    pub specimen: [[f64; 3]; 5],
    pub histology: [f64; 5],
}

impl Default for IntensityMap {
    fn default() -> Self {
        // Specimen saturations: 0.05, 0.85, 0.70, 0.55, 0.30.
        Self {
            specimen: [
                [0.60, 0.60, 0.57],
                [0.65, 0.25, 0.0975],
                [0.70, 0.35, 0.21],
                [0.78, 0.45, 0.351],
                [0.80, 0.72, 0.56],
            ],
            histology: [0.95, 0.42, 0.30, 0.55, 0.82],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoleConfig {
    pub count: usize,
    pub radius: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_dims: (usize, usize),
    /// Painted in order; later regions cover earlier ones. Pixels outside
    /// every region are background.
    pub tissue_regions: Vec<TissueRegion>,
    pub deformation: DeformationConfig,
    pub intensity_map: IntensityMap,
    /// Additive gray-level noise, applied independently per modality.
    pub noise_sigma: f64,
    /// Tissue loss punched into the histology section.
    pub holes: Option<HoleConfig>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::random_layout(WORKING_DIMS, 0)
    }
}

impl PhantomConfig {
    /// A lumpy fat specimen holding connective, DCIS and carcinoma islands.
    pub fn random_layout(dims: (usize, usize), seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5eed);
        let (w, h) = (dims.0 as f64, dims.1 as f64);
        let centre = [
            0.5 * w + rng.random_range(-0.04..0.04) * w,
            0.5 * h + rng.random_range(-0.04..0.04) * h,
        ];
        let radii = [
            rng.random_range(0.30..0.36) * w,
            rng.random_range(0.30..0.36) * h,
        ];
        let mut regions = vec![TissueRegion {
            class: TissueClass::Fat,
            polygon: blob(&mut rng, centre, radii, 0.08, 28),
        }];
        let islands = [
            TissueClass::Connective,
            TissueClass::Connective,
            TissueClass::InvasiveCarcinoma,
            TissueClass::Dcis,
            TissueClass::Dcis,
        ];
        for class in islands {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let dist: f64 = rng.random_range(0.0..0.55);
            let c = [
                centre[0] + dist * radii[0] * angle.cos(),
                centre[1] + dist * radii[1] * angle.sin(),
            ];
            let r = match class {
                TissueClass::Connective => rng.random_range(0.10..0.16) * w,
                TissueClass::InvasiveCarcinoma => rng.random_range(0.08..0.13) * w,
                _ => rng.random_range(0.04..0.07) * w,
            };
            let aspect = rng.random_range(0.6..1.0);
            regions.push(TissueRegion {
                class,
                polygon: blob(&mut rng, c, [r, r * aspect], 0.15, 16),
            });
        }
        Self {
            image_dims: dims,
            tissue_regions: regions,
            deformation: DeformationConfig::default(),
            intensity_map: IntensityMap::default(),
            noise_sigma: 0.02,
            holes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.image_dims;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if w < 16 || h < 16 {
            return bad(format!(
                "phantom.image_dims: must be at least 16x16, got {w}x{h}"
            ));
        }
        for (k, region) in self.tissue_regions.iter().enumerate() {
            if region.polygon.len() < 3 {
                return bad(format!(
                    "phantom.tissue_regions[{k}]: polygon needs >= 3 vertices"
                ));
            }
            if region.polygon.iter().any(|p| {
                !(0.0..=(w - 1) as f64).contains(&p[0]) || !(0.0..=(h - 1) as f64).contains(&p[1])
            }) {
                return bad(format!(
                    "phantom.tissue_regions[{k}]: polygon leaves the image"
                ));
            }
        }
        let d = &self.deformation;
        if d.control_spacing.is_nan()
            || d.control_spacing <= 0.0
            || d.max_displacement.is_nan()
            || d.max_displacement < 0.0
        {
            return bad(
                "phantom.deformation: spacing must be > 0 and max_displacement >= 0".into(),
            );
        }
        if d.max_displacement >= d.control_spacing {
            return bad(
                "phantom.deformation: max_displacement must stay below control_spacing".into(),
            );
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad("phantom.noise_sigma: must be >= 0".into());
        }
        Ok(())
    }

    /// Class of every pixel in specimen space.
    pub fn class_map(&self) -> AnnotationImage {
        let (w, h) = self.image_dims;
        AnnotationImage::from_fn(w, h, |x, y| {
            let p = [x as f64, y as f64];
            self.tissue_regions
                .iter()
                .rev()
                .find(|r| point_in_polygon(p, &r.polygon))
                .map_or(TissueClass::Background, |r| r.class)
        })
    }
}

fn blob(
    rng: &mut ChaCha8Rng,
    centre: [f64; 2],
    radii: [f64; 2],
    jitter: f64,
    vertices: usize,
) -> Vec<[f64; 2]> {
    (0..vertices)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / vertices as f64;
            let s = 1.0 + rng.random_range(-jitter..=jitter);
            [
                centre[0] + s * radii[0] * t.cos(),
                centre[1] + s * radii[1] * t.sin(),
            ]
        })
        .collect()
}

/// Even-odd rule.
pub fn point_in_polygon(p: [f64; 2], polygon: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (polygon[i], polygon[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x_cross = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomPair {
    /// `S_O`: the specimen snapshot.
    pub specimen_image: RgbImage,
    /// `H_O`: the section, deformed and rendered with histology intensities.
    pub histology_image: GrayImage,
    /// `H_A`: labels aligned with `histology_image`.
    pub annotation: AnnotationImage,
    /// Labels aligned with `specimen_image`.
    pub specimen_classes: AnnotationImage,
    /// `histology(x) = specimen_content(x + truth_ddf(x))`.
    pub truth_ddf: DisplacementField,
}

/// Bilinear interpolation of a random control-point displacement grid.
pub fn smooth_warp(
    dims: (usize, usize),
    deformation: &DeformationConfig,
    rng: &mut ChaCha8Rng,
) -> DisplacementField {
    let (w, h) = dims;
    let s = deformation.control_spacing;
    let nx = ((w - 1) as f64 / s).ceil() as usize + 1;
    let ny = ((h - 1) as f64 / s).ceil() as usize + 1;
    let m = deformation.max_displacement;
    let t = deformation.translation;
    let mut grid = Vec::with_capacity(nx * ny);
    for _ in 0..nx * ny {
        let (dx, dy) = if m > 0.0 {
            (rng.random_range(-m..=m), rng.random_range(-m..=m))
        } else {
            (0.0, 0.0)
        };
        grid.push([t[0] + dx, t[1] + dy]);
    }
    DisplacementField::from_fn(w, h, |x, y| {
        let gx = x as f64 / s;
        let gy = y as f64 / s;
        let (i0, j0) = (gx.floor() as usize, gy.floor() as usize);
        let (i1, j1) = ((i0 + 1).min(nx - 1), (j0 + 1).min(ny - 1));
        let (fx, fy) = (gx - i0 as f64, gy - j0 as f64);
        let at = |i: usize, j: usize| grid[j * nx + i];
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let top = at(i0, j0)[k] * (1.0 - fx) + at(i1, j0)[k] * fx;
            let bottom = at(i0, j1)[k] * (1.0 - fx) + at(i1, j1)[k] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    })
}

pub fn generate_phantom_pair(config: &PhantomConfig, seed: u64) -> Result<PhantomPair> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = config.image_dims;
    let truth_ddf = smooth_warp(config.image_dims, &config.deformation, &mut rng);
    let specimen_classes = config.class_map();
    let mut annotation = specimen_classes.warped(&truth_ddf)?;

    if let Some(holes) = &config.holes {
        let tissue: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| annotation.get(x, y) != TissueClass::Background)
            .collect();
        let mut classes = annotation.classes().to_vec();
        for _ in 0..holes.count {
            if tissue.is_empty() {
                break;
            }
            let (cx, cy) = tissue[rng.random_range(0..tissue.len())];
            for (x, y) in disk_pixels([cx as f64, cy as f64], holes.radius, (w, h)).0 {
                classes[y * w + x] = TissueClass::Background;
            }
        }
        annotation = AnnotationImage::new(w, h, classes)?;
    }

    let noise = normal(config.noise_sigma);
    let map = &config.intensity_map;
    let specimen_image = RgbImage::from_fn(w, h, |x, y| {
        let n = sample(&noise, &mut rng);
        map.specimen[specimen_classes.get(x, y).index()].map(|c| c + n)
    });
    let histology_image = GrayImage::from_fn(w, h, |x, y| {
        map.histology[annotation.get(x, y).index()] + sample(&noise, &mut rng)
    });
    Ok(PhantomPair {
        specimen_image,
        histology_image,
        annotation,
        specimen_classes,
        truth_ddf,
    })
}

/// Simulated projector dots: every pixel within each point's radius is
/// brightened by 0.5 per channel (saturating at 1).
pub fn render_poi_image(specimen_image: &RgbImage, pois: &[MeasurementPoint]) -> Result<RgbImage> {
    let dims = specimen_image.dims();
    let mut out = specimen_image.clone();
    for (index, p) in pois.iter().enumerate() {
        if !p.in_bounds(dims) {
            return Err(Error::PoiOutOfBounds {
                index,
                x: p.center[0],
                y: p.center[1],
                width: dims.0,
                height: dims.1,
            });
        }
        for (x, y) in disk_pixels(p.center, p.radius, dims).0 {
            let v = specimen_image.get(x, y);
            out.set(x, y, v.map(|c| (c + 0.5).min(1.0)));
        }
    }
    Ok(out)
}

/// Up to `count` measurement locations on tissue of `classes`, at integer
/// pixel positions, with their whole disk (plus `margin`) inside the image
/// and at least `2·radius + margin` between centers.
pub fn random_poi_layout(
    classes: &AnnotationImage,
    count: usize,
    radius: f64,
    margin: f64,
    seed: u64,
) -> Vec<MeasurementPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = classes.dims();
    let pad = (radius + margin).ceil() as usize;
    let mut points: Vec<MeasurementPoint> = Vec::with_capacity(count);
    if 2 * pad >= w || 2 * pad >= h {
        return points;
    }
    let min_gap = 2.0 * radius + margin;
    for _ in 0..count * 200 {
        if points.len() == count {
            break;
        }
        let x = rng.random_range(pad..w - pad);
        let y = rng.random_range(pad..h - pad);
        if classes.get(x, y) == TissueClass::Background {
            continue;
        }
        let c = [x as f64, y as f64];
        if points
            .iter()
            .any(|p| (p.center[0] - c[0]).hypot(p.center[1] - c[1]) < min_gap)
        {
            continue;
        }
        points.push(MeasurementPoint::new(points.len(), c[0], c[1], radius));
    }
    points
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{estimate_projector_transform, mapping_rmse};
    use crate::labeling::{extract_poi_centers, rasterize_disks};
    use crate::registration::{dice_score, warp_image};

    fn noiseless() -> ScenarioConfig {
        ScenarioConfig {
            depth_noise_sigma: 0.0,
            corner_noise_sigma: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn flat_noiseless_scene() {
        let cfg = ScenarioConfig {
            plane_truth: PlaneModel::new(0.0, 0.0, -500.0),
            ..noiseless()
        };
        let (frames, truth) = generate_depth_scene(&cfg).unwrap();
        assert_eq!(truth, cfg.plane_truth);
        assert_eq!(frames.len(), cfg.frame_count);
        assert!(frames
            .iter()
            .all(|f| f.depths().iter().all(|&d| d == 500.0)));
    }

    #[test]
    fn tilted_scene_substitution() {
        let (frames, _) = generate_depth_scene(&noiseless()).unwrap();
        assert_eq!(frames[0].get(100, 0), Some(499.0));
    }

    #[test]
    fn generators_are_deterministic() {
        let cfg = ScenarioConfig {
            seed: 99,
            corner_noise_sigma: 0.3,
            ..Default::default()
        };
        assert_eq!(
            generate_depth_scene(&cfg).unwrap(),
            generate_depth_scene(&cfg).unwrap()
        );
        assert_eq!(
            generate_checkerboard_correspondences(&cfg).unwrap(),
            generate_checkerboard_correspondences(&cfg).unwrap()
        );
        let pc = PhantomConfig::random_layout((64, 48), 3);
        assert_eq!(
            generate_phantom_pair(&pc, 5).unwrap(),
            generate_phantom_pair(&pc, 5).unwrap()
        );
    }

    #[test]
    fn board_counts_and_identity() {
        let cfg = ScenarioConfig {
            board_heights: vec![10.0],
            transform_truth: RigidTransform::identity(),
            ..noiseless()
        };
        let (set, _) = generate_checkerboard_correspondences(&cfg).unwrap();
        assert_eq!(set.len(), 12);
        assert!(set.pairs.iter().all(|c| c.camera == c.projector));
        let (set, _) = generate_checkerboard_correspondences(&noiseless()).unwrap();
        assert_eq!(set.len(), 60);
    }

    #[test]
    fn checkerboard_roundtrip_recovers_truth() {
        let (set, truth) = generate_checkerboard_correspondences(&noiseless()).unwrap();
        let cal = estimate_projector_transform(&set).unwrap();
        assert!((cal.transform.rotation() - truth.rotation()).abs().max() < 1e-6);
        assert!(
            (cal.transform.translation() - truth.translation())
                .abs()
                .max()
                < 1e-6
        );
        assert!(mapping_rmse(&cal.transform, &set).unwrap() < 1e-6);
    }

    #[test]
    fn zero_deformation_phantom_is_aligned() {
        let mut pc = PhantomConfig::random_layout((80, 60), 1);
        pc.deformation.max_displacement = 0.0;
        let pair = generate_phantom_pair(&pc, 2).unwrap();
        assert!(pair.truth_ddf.vectors().iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(pair.annotation, pair.specimen_classes);
    }

    #[test]
    fn translation_only_grid_gives_constant_field() {
        let mut pc = PhantomConfig::random_layout((80, 60), 1);
        pc.deformation.max_displacement = 0.0;
        pc.deformation.translation = [5.0, 0.0];
        let pair = generate_phantom_pair(&pc, 2).unwrap();
        assert!(pair.truth_ddf.vectors().iter().all(|v| *v == [5.0, 0.0]));
    }

    #[test]
    fn annotation_is_class_of_preimage() {
        let pc = PhantomConfig::random_layout((96, 72), 4);
        let pair = generate_phantom_pair(&pc, 11).unwrap();
        let (w, h) = pc.image_dims;
        for y in 0..h {
            for x in 0..w {
                let [dx, dy] = pair.truth_ddf.get(x, y);
                let (sx, sy) = ((x as f64 + dx).round(), (y as f64 + dy).round());
                let expected = if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
                    TissueClass::Background
                } else {
                    pair.specimen_classes.get(sx as usize, sy as usize)
                };
                assert_eq!(pair.annotation.get(x, y), expected);
            }
        }
    }

    #[test]
    fn warped_specimen_regions_match_annotation() {
        let mut pc = PhantomConfig::random_layout(WORKING_DIMS, 8);
        pc.deformation.max_displacement = 10.0;
        let pair = generate_phantom_pair(&pc, 21).unwrap();
        let (w, h) = pc.image_dims;
        for class in TissueClass::ALL {
            let indicator = GrayImage::from_fn(w, h, |x, y| {
                (pair.specimen_classes.get(x, y) == class) as u8 as f64
            });
            let warped = warp_image(&indicator, &pair.truth_ddf).unwrap();
            let a = crate::labeling::BinaryMask::from_fn(w, h, |x, y| warped.get(x, y) >= 0.5);
            let b = crate::labeling::BinaryMask::from_fn(w, h, |x, y| {
                pair.annotation.get(x, y) == class
            });
            let dice = dice_score(&a, &b).unwrap();
            assert!(dice >= 0.99, "{class}: {dice}");
        }
    }

    #[test]
    fn holes_remove_tissue() {
        let mut pc = PhantomConfig::random_layout((96, 72), 4);
        let base = generate_phantom_pair(&pc, 3).unwrap();
        pc.holes = Some(HoleConfig {
            count: 3,
            radius: 4.0,
        });
        let holed = generate_phantom_pair(&pc, 3).unwrap();
        assert!(holed.annotation.tissue_mask().count() < base.annotation.tissue_mask().count());
    }

    #[test]
    fn invalid_phantom_rejected() {
        let mut pc = PhantomConfig::random_layout((96, 72), 4);
        pc.deformation.max_displacement = 60.0;
        assert!(generate_phantom_pair(&pc, 0).is_err());
    }

    #[test]
    fn poi_rendering() {
        let base = RgbImage::from_fn(100, 100, |x, y| {
            [0.3, (x % 7) as f64 / 10.0, (y % 5) as f64 / 10.0]
        });
        assert_eq!(render_poi_image(&base, &[]).unwrap(), base);

        let one = [MeasurementPoint::new(0, 50.0, 50.0, 4.0)];
        let out = render_poi_image(&base, &one).unwrap();
        let changed =
            crate::labeling::BinaryMask::from_fn(100, 100, |x, y| out.get(x, y) != base.get(x, y));
        assert_eq!(changed, rasterize_disks(&one, (100, 100), 4.0).mask);

        let two = [
            MeasurementPoint::new(0, 20.0, 20.0, 4.0),
            MeasurementPoint::new(1, 80.0, 60.0, 3.0),
        ];
        let out = render_poi_image(&base, &two).unwrap();
        let changed = (0..100 * 100)
            .filter(|&i| out.data()[i] != base.data()[i])
            .count();
        assert_eq!(changed, 49 + 29);

        let centers = extract_poi_centers(&out, &base).unwrap();
        assert_eq!(centers.len(), 2);
        assert_eq!(centers[0].center, [20.0, 20.0]);
        assert_eq!(centers[1].center, [80.0, 60.0]);

        let outside = [MeasurementPoint::new(0, 120.0, 5.0, 2.0)];
        assert!(matches!(
            render_poi_image(&base, &outside),
            Err(Error::PoiOutOfBounds { .. })
        ));
    }

    #[test]
    fn poi_layout_respects_tissue_spacing_and_margin() {
        let pc = PhantomConfig::random_layout((256, 192), 3);
        let classes = pc.class_map();
        let pts = random_poi_layout(&classes, 8, 8.0, 4.0, 11);
        assert_eq!(pts.len(), 8);
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(p.id, i);
            let [x, y] = p.center;
            assert_eq!((x.fract(), y.fract()), (0.0, 0.0));
            assert!(x >= 12.0 && y >= 12.0 && x <= 243.0 && y <= 179.0);
            assert_ne!(classes.get(x as usize, y as usize), TissueClass::Background);
            for q in &pts[..i] {
                assert!((q.center[0] - x).hypot(q.center[1] - y) >= 20.0);
            }
        }
        assert_eq!(random_poi_layout(&classes, 8, 8.0, 4.0, 11), pts);
    }
}
