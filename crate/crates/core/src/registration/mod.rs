//! Multi-modal deformable registration.
//!
//! The fixed image `F` (histology grayscale by default) and the moving image
//! `M` (specimen saturation channel) are brought to a common working size,
//! then a dense displacement field `φ` is estimated such that the predicted
//! image `M(φ)(x) = M(x + φ(x))` shares maximal mutual information with `F`.

mod convert;
mod metrics;
mod optimize;
mod warp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use convert::{resize, saturation_channel, to_grayscale};
pub use metrics::{
    dice_score, foreground_mask, histogram_entropy, mutual_information, JointHistogram,
};
pub use optimize::{estimate_ddf, gradient_energy};
pub use warp::{sample_bilinear, warp_image};

/// Working resolution used by the registration stage.
pub const WORKING_DIMS: (usize, usize) = (256, 192);

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty image {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidConfig(format!(
                "gray intensity {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]` (NaN maps to 0).
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self::from_fn(width, height, |_, _| value)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = clamp_unit(v);
    }
}

/// Three-channel image, channels in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty image {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        if data.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("rgb channel outside [0, 1]".into()));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Self {
        assert!(width > 0 && height > 0, "empty image");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).map(clamp_unit));
            }
        }
        Self {
            width,
            height,
            data,
        }
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

    pub fn data(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v.map(clamp_unit);
    }
}

/// Per-pixel `(dx, dy)` displacements in pixels. The value at fixed-image
/// pixel `x` points to where that pixel's content lives in the moving image.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    vectors: Vec<[f64; 2]>,
}

impl DisplacementField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f64; 2]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty field {width}x{height}"
            )));
        }
        if vectors.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (vectors.len(), 1),
            });
        }
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite displacement".into()));
        }
        Ok(Self {
            width,
            height,
            vectors,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, [0.0, 0.0])
    }

    pub fn constant(width: usize, height: usize, v: [f64; 2]) -> Self {
        assert!(width > 0 && height > 0, "empty field");
        Self {
            width,
            height,
            vectors: vec![v; width * height],
        }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f64; 2],
    ) -> Self {
        assert!(width > 0 && height > 0, "empty field");
        let mut vectors = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                vectors.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            vectors,
        }
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

    pub fn vectors(&self) -> &[[f64; 2]] {
        &self.vectors
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        self.vectors[y * self.width + x]
    }

    /// Bilinear interpolation with edge clamping at a continuous position.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let (x0, x1, fx) = warp::bracket(x, self.width);
        let (y0, y1, fy) = warp::bracket(y, self.height);
        let at = |xx: usize, yy: usize| self.vectors[yy * self.width + xx];
        let mut out = [0.0; 2];
        for (k, o) in out.iter_mut().enumerate() {
            let top = at(x0, y0)[k] * (1.0 - fx) + at(x1, y0)[k] * fx;
            let bottom = at(x0, y1)[k] * (1.0 - fx) + at(x1, y1)[k] * fx;
            *o = top * (1.0 - fy) + bottom * fy;
        }
        out
    }

    pub fn mean_magnitude(&self) -> f64 {
        self.vectors.iter().map(|v| v[0].hypot(v[1])).sum::<f64>() / self.vectors.len() as f64
    }

    /// Resamples the field to `dims`, scaling the vectors by the size ratio
    /// so they stay expressed in destination pixels.
    pub fn rescaled(&self, dims: (usize, usize)) -> DisplacementField {
        let (w, h) = dims;
        let sx = w as f64 / self.width as f64;
        let sy = h as f64 / self.height as f64;
        DisplacementField::from_fn(w, h, |x, y| {
            let src_x = (x as f64 + 0.5) / sx - 0.5;
            let src_y = (y as f64 + 0.5) / sy - 0.5;
            let v = self.sample(src_x, src_y);
            [v[0] * sx, v[1] * sy]
        })
    }

    /// Solves `p + φ(p) = target` for `p` by fixed-point iteration: the
    /// fixed-image position whose content comes from moving-image `target`.
    pub fn invert_point(&self, target: (f64, f64)) -> (f64, f64) {
        let mut p = target;
        for _ in 0..50 {
            let d = self.sample(p.0, p.1);
            let next = (target.0 - d[0], target.1 - d[1]);
            let moved = (next.0 - p.0).hypot(next.1 - p.1);
            p = next;
            if moved < 1e-9 {
                break;
            }
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub pyramid_levels: usize,
    pub iterations_per_level: usize,
    pub mi_bins: usize,
    pub smoothness_weight: f64,
    pub step_size: f64,
    pub seed: u64,
    pub working_dims: (usize, usize),
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 4,
            iterations_per_level: 200,
            mi_bins: 32,
            smoothness_weight: 1.0,
            step_size: 0.5,
            seed: 0,
            working_dims: WORKING_DIMS,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::InvalidConfig(format!("{field}: {why}")));
        if self.mi_bins < 2 {
            return bad("mi_bins", format!("must be >= 2, got {}", self.mi_bins));
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels", "must be >= 1".into());
        }
        if !(self.smoothness_weight.is_finite() && self.smoothness_weight >= 0.0) {
            return bad(
                "smoothness_weight",
                format!("must be >= 0, got {}", self.smoothness_weight),
            );
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return bad("step_size", format!("must be > 0, got {}", self.step_size));
        }
        if self.working_dims.0 < 2 || self.working_dims.1 < 2 {
            return bad(
                "working_dims",
                format!("must be at least 2x2, got {:?}", self.working_dims),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationResult {
    pub ddf: DisplacementField,
    /// Predicted image `M(φ)`.
    pub warped: GrayImage,
    pub mi_initial: f64,
    pub mi_final: f64,
    pub dice_initial: f64,
    pub dice_final: f64,
    pub gradient_energy: f64,
    pub iterations_run: usize,
}

/// Serializable summary of a registration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub schema_version: u32,
    pub width: usize,
    pub height: usize,
    pub mi_bins: usize,
    pub mi_initial: f64,
    pub mi_final: f64,
    pub dice_initial: f64,
    pub dice_final: f64,
    pub gradient_energy: f64,
    pub mean_displacement: f64,
    pub iterations_run: usize,
}

impl RegistrationResult {
    pub fn metrics(&self, config: &RegistrationConfig) -> RegistrationMetrics {
        RegistrationMetrics {
            schema_version: 1,
            width: self.ddf.width(),
            height: self.ddf.height(),
            mi_bins: config.mi_bins,
            mi_initial: self.mi_initial,
            mi_final: self.mi_final,
            dice_initial: self.dice_initial,
            dice_final: self.dice_final,
            gradient_energy: self.gradient_energy,
            mean_displacement: self.ddf.mean_magnitude(),
            iterations_run: self.iterations_run,
        }
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

pub(crate) fn check_dims(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
