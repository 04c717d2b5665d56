//! Calibration mathematics for the point projection mapping rig.
//!
//! Base-plane calibration fits `a·x + b·y + z + c = 0` to samples of an empty
//! work surface and subtracts the tilt from subsequent depth frames.
//! Projector calibration estimates the rigid transform taking camera-space
//! points to projector-space points from checkerboard corner pairs.
//!
//! Depth pixel `(row, col)` maps to lateral millimeters as
//! `x = col·pixel_pitch`, `y = row·pixel_pitch`, origin at the top-left.

use nalgebra::{Matrix3, Rotation3, Vector3, SVD};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simplex::{self, SimplexOptions};

/// Default number of random pixels drawn from an averaged frame for the
/// base-plane fit.
pub const DEFAULT_PLANE_SAMPLES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn distance(&self, other: &Point3) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(v: [f64; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<Point3> for [f64; 3] {
    fn from(p: Point3) -> Self {
        [p.x, p.y, p.z]
    }
}

/// A rectangular raster of depth samples in millimeters.
///
/// Invalid pixels (sensor dropouts) are stored as NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFrame {
    width: usize,
    height: usize,
    pixel_pitch: f64,
    depths: Vec<f64>,
}

impl DepthFrame {
    pub fn new(width: usize, height: usize, pixel_pitch: f64, depths: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "depth frame must be non-empty, got {width}x{height}"
            )));
        }
        if !(pixel_pitch.is_finite() && pixel_pitch > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pixel_pitch must be positive, got {pixel_pitch}"
            )));
        }
        if depths.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (depths.len(), 1),
            });
        }
        let depths = depths
            .into_iter()
            .map(|d| if d.is_finite() { d } else { f64::NAN })
            .collect();
        Ok(Self {
            width,
            height,
            pixel_pitch,
            depths,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        pixel_pitch: f64,
        mut f: impl FnMut(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut depths = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                depths.push(f(col as f64 * pixel_pitch, row as f64 * pixel_pitch));
            }
        }
        Self::new(width, height, pixel_pitch, depths)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    /// Depth at `(col, row)`, `None` for an invalid pixel.
    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let d = self.depths[row * self.width + col];
        (!d.is_nan()).then_some(d)
    }

    pub fn lateral(&self, col: usize, row: usize) -> (f64, f64) {
        (col as f64 * self.pixel_pitch, row as f64 * self.pixel_pitch)
    }

    pub fn valid_count(&self) -> usize {
        self.depths.iter().filter(|d| !d.is_nan()).count()
    }

    /// All valid pixels as camera-space points.
    pub fn points(&self) -> Vec<Point3> {
        self.depths
            .iter()
            .enumerate()
            .filter(|(_, d)| !d.is_nan())
            .map(|(i, &d)| {
                let (x, y) = self.lateral(i % self.width, i / self.width);
                Point3::new(x, y, d)
            })
            .collect()
    }
}

/// Base-plane coefficients: a point lies on the plane iff `a·x + b·y + z + c = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl PlaneModel {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    /// Signed vertical residual `a·x + b·y + z + c`.
    pub fn residual(&self, p: &Point3) -> f64 {
        self.a * p.x + self.b * p.y + p.z + self.c
    }

    /// Depth of the plane at lateral position `(x, y)`.
    pub fn depth_at(&self, x: f64, y: f64) -> f64 {
        -(self.a * x + self.b * y + self.c)
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.c.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneFit {
    pub plane: PlaneModel,
    /// Mean squared vertical residual at the optimum.
    pub residual: f64,
    pub samples: usize,
}

/// Least-squares fit of `a·x + b·y + z + c = 0` via the normal equations.
///
/// Coordinates are centered before solving so that large depth offsets do
/// not cost precision in the slopes.
pub fn fit_base_plane(samples: &[Point3]) -> Result<PlaneFit> {
    let n = samples.len();
    if n < 3 {
        return Err(Error::DegenerateSamples(format!(
            "need at least 3 samples, got {n}"
        )));
    }
    if samples.iter().any(|p| !p.is_finite()) {
        return Err(Error::DegenerateSamples("non-finite sample".into()));
    }
    let nf = n as f64;
    let (mut mx, mut my, mut mz) = (0.0, 0.0, 0.0);
    for p in samples {
        mx += p.x;
        my += p.y;
        mz += p.z;
    }
    mx /= nf;
    my /= nf;
    mz /= nf;

    let (mut sxx, mut sxy, mut syy, mut sxz, mut syz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for p in samples {
        let (dx, dy, dz) = (p.x - mx, p.y - my, p.z - mz);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
        sxz += dx * dz;
        syz += dy * dz;
    }
    let det = sxx * syy - sxy * sxy;
    if det.is_nan() || det <= 1e-12 * sxx * syy || sxx == 0.0 || syy == 0.0 {
        return Err(Error::DegenerateSamples(
            "sample positions are collinear in (x, y)".into(),
        ));
    }
    // Minimize Σ(a·dx + b·dy + dz)²  =>  [sxx sxy; sxy syy]·[a b]ᵀ = −[sxz syz]ᵀ
    let a = (-sxz * syy + syz * sxy) / det;
    let b = (-syz * sxx + sxz * sxy) / det;
    let c = -(a * mx + b * my + mz);
    let plane = PlaneModel::new(a, b, c);
    let residual = samples
        .iter()
        .map(|p| plane.residual(p).powi(2))
        .sum::<f64>()
        / nf;
    Ok(PlaneFit {
        plane,
        residual,
        samples: n,
    })
}

/// Applies the base-plane correction `z_new = z + a·x + b·y + c` to every
/// valid pixel.
pub fn correct_depth(frame: &DepthFrame, plane: &PlaneModel) -> DepthFrame {
    let mut out = frame.clone();
    for (i, d) in out.depths.iter_mut().enumerate() {
        if d.is_nan() {
            continue;
        }
        let (x, y) = frame.lateral(i % frame.width, i / frame.width);
        *d += plane.a * x + plane.b * y + plane.c;
    }
    out
}

/// Per-pixel mean over the frames in which the pixel is valid.
pub fn average_depth_frames(frames: &[DepthFrame]) -> Result<DepthFrame> {
    let first = frames.first().ok_or(Error::EmptyInput("depth frames"))?;
    for f in frames {
        if f.dims() != first.dims() {
            return Err(Error::DimensionMismatch {
                expected: first.dims(),
                found: f.dims(),
            });
        }
    }
    let len = first.depths.len();
    let mut sums = vec![0.0; len];
    let mut counts = vec![0u32; len];
    for f in frames {
        for (i, &d) in f.depths.iter().enumerate() {
            if !d.is_nan() {
                sums[i] += d;
                counts[i] += 1;
            }
        }
    }
    let depths = sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
        .collect();
    Ok(DepthFrame {
        depths,
        ..first.clone()
    })
}

/// Draws up to `count` distinct valid pixels uniformly at random.
pub fn sample_plane_points(frame: &DepthFrame, count: usize, seed: u64) -> Vec<Point3> {
    let valid = frame.points();
    let amount = count.min(valid.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, valid.len(), amount).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| valid[i]).collect()
}

/// Averages frames, samples random valid pixels and fits the base plane.
pub fn calibrate_base_plane(frames: &[DepthFrame], samples: usize, seed: u64) -> Result<PlaneFit> {
    let mean = average_depth_frames(frames)?;
    fit_base_plane(&sample_plane_points(&mean, samples, seed))
}

/// Rotation `R` and translation `T` mapping camera space to projector space:
/// `P_p = R·P_c + T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RigidTransformRepr", into = "RigidTransformRepr")]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RigidTransformRepr {
    /// Row-major.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl TryFrom<RigidTransformRepr> for RigidTransform {
    type Error = String;

    fn try_from(r: RigidTransformRepr) -> Result<Self, String> {
        let rot = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        RigidTransform::new(rot, Vector3::from(r.translation)).map_err(|e| e.to_string())
    }
}

impl From<RigidTransform> for RigidTransformRepr {
    fn from(t: RigidTransform) -> Self {
        let r = t.rotation;
        RigidTransformRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [t.translation.x, t.translation.y, t.translation.z],
        }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    /// Validates `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity())
            .abs()
            .max();
        let det = rotation.determinant();
        if !(ortho <= 1e-9 && (det - 1.0).abs() <= 1e-9)
            || !translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidConfig(format!(
                "not a proper rigid transform (orthogonality error {ortho:e}, det {det})"
            )));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(rotation: Rotation3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: *rotation.matrix(),
            translation,
        }
    }

    /// Rotation about z by `radians`.
    pub fn rot_z(radians: f64, translation: Vector3<f64>) -> Self {
        Self::from_rotation(Rotation3::from_euler_angles(0.0, 0.0, radians), translation)
    }

    /// `roll` about x, then `pitch` about y, then `yaw` about z.
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_rotation(Rotation3::from_euler_angles(roll, pitch, yaw), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from_vector(&(self.rotation * p.to_vector() + self.translation))
    }
}

pub fn map_point(transform: &RigidTransform, p: Point3) -> Point3 {
    transform.apply(&p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence {
    pub camera: Point3,
    pub projector: Point3,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Diagonal of the axis-aligned bounding box of the camera points.
    pub fn camera_extent(&self) -> f64 {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.pairs {
            let v = p.camera.to_vector();
            lo = lo.inf(&v);
            hi = hi.sup(&v);
        }
        if self.pairs.is_empty() {
            0.0
        } else {
            (hi - lo).norm()
        }
    }
}

/// Root mean square of `‖R·P_c + T − P_p‖` over all pairs.
pub fn mapping_rmse(transform: &RigidTransform, set: &CorrespondenceSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyInput("correspondences"));
    }
    Ok(mean_squared_error(transform, set).sqrt())
}

fn mean_squared_error(transform: &RigidTransform, set: &CorrespondenceSet) -> f64 {
    let sum: f64 = set
        .pairs
        .iter()
        .map(|c| (transform.apply(&c.camera).to_vector() - c.projector.to_vector()).norm_squared())
        .sum();
    sum / set.len() as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverBackend {
    /// Closed-form orthogonal Procrustes (Kabsch with reflection correction).
    #[default]
    Procrustes,
    /// Nelder-Mead over three Euler angles and three translations, started
    /// from the identity rotation and the centroid offset.
    NelderMead,
    /// Procrustes followed by a Nelder-Mead polish.
    ProcrustesRefined,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorCalibration {
    pub transform: RigidTransform,
    pub rmse: f64,
    pub pairs: usize,
    pub backend: SolverBackend,
    /// Residual RMSE exceeds 10% of the camera point-cloud extent; the data
    /// grossly violates the rigid model.
    pub not_rigid: bool,
}

pub fn estimate_projector_transform(set: &CorrespondenceSet) -> Result<ProjectorCalibration> {
    estimate_projector_transform_with(set, SolverBackend::Procrustes)
}

pub fn estimate_projector_transform_with(
    set: &CorrespondenceSet,
    backend: SolverBackend,
) -> Result<ProjectorCalibration> {
    check_configuration(set)?;
    let transform = match backend {
        SolverBackend::Procrustes => procrustes(set)?,
        SolverBackend::NelderMead => {
            let (cam_c, proj_c) = centroids(set);
            let start = RigidTransform::from_translation(proj_c - cam_c);
            simplex_refine(set, &start)
        }
        SolverBackend::ProcrustesRefined => {
            let closed = procrustes(set)?;
            let refined = simplex_refine(set, &closed);
            if mean_squared_error(&refined, set) < mean_squared_error(&closed, set) {
                refined
            } else {
                closed
            }
        }
    };
    let rmse = mapping_rmse(&transform, set)?;
    Ok(ProjectorCalibration {
        transform,
        rmse,
        pairs: set.len(),
        backend,
        not_rigid: rmse > 0.1 * set.camera_extent(),
    })
}

fn check_configuration(set: &CorrespondenceSet) -> Result<()> {
    if set.len() < 4 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 4 correspondences, got {}",
            set.len()
        )));
    }
    if set
        .pairs
        .iter()
        .any(|c| !c.camera.is_finite() || !c.projector.is_finite())
    {
        return Err(Error::DegenerateConfiguration("non-finite point".into()));
    }
    let (cam_c, _) = centroids(set);
    let mut scatter = Matrix3::zeros();
    for c in &set.pairs {
        let d = c.camera.to_vector() - cam_c;
        scatter += d * d.transpose();
    }
    let mut sv = scatter.symmetric_eigenvalues();
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[0] <= 0.0 || sv[1] <= 1e-10 * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "camera points are coincident or collinear".into(),
        ));
    }
    if sv[2] <= 1e-10 * sv[0] {
        return Err(Error::DegenerateConfiguration(
            "camera points are coplanar; capture boards at several heights".into(),
        ));
    }
    Ok(())
}

fn centroids(set: &CorrespondenceSet) -> (Vector3<f64>, Vector3<f64>) {
    let n = set.len() as f64;
    let mut cam = Vector3::zeros();
    let mut proj = Vector3::zeros();
    for c in &set.pairs {
        cam += c.camera.to_vector();
        proj += c.projector.to_vector();
    }
    (cam / n, proj / n)
}

fn procrustes(set: &CorrespondenceSet) -> Result<RigidTransform> {
    let (cam_c, proj_c) = centroids(set);
    let mut cross = Matrix3::zeros();
    for c in &set.pairs {
        cross += (c.camera.to_vector() - cam_c) * (c.projector.to_vector() - proj_c).transpose();
    }
    let svd = SVD::new(cross, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::DegenerateConfiguration("SVD failed".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let rotation = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    // Re-orthonormalize away the last ulps of SVD round-off.
    let rotation = Rotation3::from_matrix_eps(
        &rotation,
        1e-15,
        0,
        Rotation3::from_matrix_unchecked(rotation),
    );
    let rotation = *rotation.matrix();
    Ok(RigidTransform {
        rotation,
        translation: proj_c - rotation * cam_c,
    })
}

fn simplex_refine(set: &CorrespondenceSet, start: &RigidTransform) -> RigidTransform {
    let base = Rotation3::from_matrix_unchecked(start.rotation);
    let (roll, pitch, yaw) = base.euler_angles();
    let t = start.translation;
    let x0 = [roll, pitch, yaw, t.x, t.y, t.z];
    let extent = set.camera_extent().max(1.0);
    let steps = [0.1, 0.1, 0.1, 0.05 * extent, 0.05 * extent, 0.05 * extent];
    let build =
        |x: &[f64]| RigidTransform::from_euler(x[0], x[1], x[2], Vector3::new(x[3], x[4], x[5]));
    let res = simplex::minimize(
        |x| mean_squared_error(&build(x), set),
        &x0,
        &steps,
        &SimplexOptions::default(),
    );
    build(&res.x)
}
