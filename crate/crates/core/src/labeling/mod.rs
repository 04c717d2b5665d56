//! Tracking measurement locations into the annotated histology image.
//!
//! Measurement centers are extracted from the snapshot with projected dots,
//! rasterized as probe-sized disks, transported through the registration
//! field and overlaid with the annotation to produce per-location tissue
//! class percentages.

mod components;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::{check_dims, DisplacementField, RgbImage};

pub use components::{connected_components, Component};

/// Default probe footprint radius at working resolution.
pub const DEFAULT_POI_RADIUS_PX: f64 = 8.0;

/// Summed absolute RGB difference above which a pixel belongs to a projected dot.
pub const POI_DIFFERENCE_THRESHOLD: f64 = 0.1;

/// Fraction of background pixels above which a location is flagged off-tissue.
pub const OFF_TISSUE_FRACTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TissueClass {
    #[serde(rename = "background")]
    Background,
    #[serde(rename = "invasive_carcinoma")]
    InvasiveCarcinoma,
    #[serde(rename = "DCIS")]
    Dcis,
    #[serde(rename = "connective")]
    Connective,
    #[serde(rename = "fat")]
    Fat,
}

impl TissueClass {
    /// In default palette-index order.
    pub const ALL: [TissueClass; 5] = [
        TissueClass::Background,
        TissueClass::InvasiveCarcinoma,
        TissueClass::Dcis,
        TissueClass::Connective,
        TissueClass::Fat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TissueClass::Background => "background",
            TissueClass::InvasiveCarcinoma => "invasive_carcinoma",
            TissueClass::Dcis => "DCIS",
            TissueClass::Connective => "connective",
            TissueClass::Fat => "fat",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for TissueClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!("empty mask {width}x{height}")));
        }
        if bits.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (bits.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn new_empty(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "empty mask");
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::new_empty(width, height);
        for y in 0..height {
            for x in 0..width {
                mask.bits[y * width + x] = f(x, y);
            }
        }
        mask
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Per-pixel tissue labels of the annotated histology image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationImage {
    width: usize,
    height: usize,
    classes: Vec<TissueClass>,
}

impl AnnotationImage {
    pub fn new(width: usize, height: usize, classes: Vec<TissueClass>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "empty annotation {width}x{height}"
            )));
        }
        if classes.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (classes.len(), 1),
            });
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> TissueClass,
    ) -> Self {
        assert!(width > 0 && height > 0, "empty annotation");
        let mut classes = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                classes.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            classes,
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

    pub fn classes(&self) -> &[TissueClass] {
        &self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> TissueClass {
        self.classes[y * self.width + x]
    }

    /// Mask of pixels carrying any non-background label.
    pub fn tissue_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            self.get(x, y) != TissueClass::Background
        })
    }

    /// Majority-vote resampling. Each destination pixel takes the most
    /// frequent label among the source pixels whose centers fall inside its
    /// footprint (ties go to the earlier class in [`TissueClass::ALL`]);
    /// footprints containing no source center fall back to the nearest pixel.
    pub fn downsample_majority(&self, dims: (usize, usize)) -> AnnotationImage {
        if dims == self.dims() {
            return self.clone();
        }
        let (w, h) = dims;
        let sx = self.width as f64 / w as f64;
        let sy = self.height as f64 / h as f64;
        // Source index range whose centers (i + 0.5) fall in [o·s, (o+1)·s).
        let span = |o: usize, s: f64, n: usize| {
            let lo = ((o as f64 * s - 0.5).ceil().max(0.0)) as usize;
            let hi = (((o + 1) as f64 * s - 0.5).ceil().max(0.0) as usize).min(n);
            (lo, hi)
        };
        AnnotationImage::from_fn(w, h, |ox, oy| {
            let (x0, x1) = span(ox, sx, self.width);
            let (y0, y1) = span(oy, sy, self.height);
            let mut counts = [0usize; 5];
            for y in y0..y1 {
                for x in x0..x1 {
                    counts[self.get(x, y).index()] += 1;
                }
            }
            if counts.iter().all(|&c| c == 0) {
                let nx = (((ox as f64 + 0.5) * sx) as usize).min(self.width - 1);
                let ny = (((oy as f64 + 0.5) * sy) as usize).min(self.height - 1);
                return self.get(nx, ny);
            }
            let mut best = 0;
            for k in 1..5 {
                if counts[k] > counts[best] {
                    best = k;
                }
            }
            TissueClass::ALL[best]
        })
    }

    /// Nearest-neighbour pull-back through `ddf`, identical in convention to
    /// [`warp_mask`]; out-of-bounds samples become background.
    pub fn warped(&self, ddf: &DisplacementField) -> Result<AnnotationImage> {
        check_dims(self.dims(), ddf.dims())?;
        Ok(AnnotationImage::from_fn(
            self.width,
            self.height,
            |x, y| match pull_back_index(x, y, ddf, self.width, self.height) {
                Some((sx, sy)) => self.get(sx, sy),
                None => TissueClass::Background,
            },
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPoint {
    pub id: usize,
    /// `(x, y)` in pixels.
    pub center: [f64; 2],
    /// Probe footprint in pixels; zero when not yet assigned.
    #[serde(default)]
    pub radius: f64,
}

impl MeasurementPoint {
    pub fn new(id: usize, x: f64, y: f64, radius: f64) -> Self {
        Self {
            id,
            center: [x, y],
            radius,
        }
    }

    pub fn in_bounds(&self, dims: (usize, usize)) -> bool {
        let [x, y] = self.center;
        x.is_finite()
            && y.is_finite()
            && x >= 0.0
            && y >= 0.0
            && x <= (dims.0 - 1) as f64
            && y <= (dims.1 - 1) as f64
    }
}

/// Lattice pixels `p` with `‖p − center‖ ≤ radius`; the flag reports whether
/// part of the disk falls outside `dims`.
pub fn disk_pixels(
    center: [f64; 2],
    radius: f64,
    dims: (usize, usize),
) -> (Vec<(usize, usize)>, bool) {
    let [cx, cy] = center;
    let r = radius.max(0.0);
    let r2 = r * r;
    let mut pixels = Vec::new();
    let mut clipped = false;
    let y_lo = (cy - r).ceil() as i64;
    let y_hi = (cy + r).floor() as i64;
    let x_lo = (cx - r).ceil() as i64;
    let x_hi = (cx + r).floor() as i64;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            if dx * dx + dy * dy > r2 {
                continue;
            }
            if x < 0 || y < 0 || x >= dims.0 as i64 || y >= dims.1 as i64 {
                clipped = true;
                continue;
            }
            pixels.push((x as usize, y as usize));
        }
    }
    (pixels, clipped)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiskRaster {
    pub mask: BinaryMask,
    /// Ids of points whose disk was cut by the image border.
    pub clipped: Vec<usize>,
}

/// Union of probe disks of `radius` around every point (the argument
/// overrides per-point radii).
pub fn rasterize_disks(
    points: &[MeasurementPoint],
    dims: (usize, usize),
    radius: f64,
) -> DiskRaster {
    let mut mask = BinaryMask::new_empty(dims.0, dims.1);
    let mut clipped = Vec::new();
    for p in points {
        let (pixels, cut) = disk_pixels(p.center, radius, dims);
        for (x, y) in pixels {
            mask.set(x, y, true);
        }
        if cut {
            clipped.push(p.id);
        }
    }
    DiskRaster { mask, clipped }
}

#[inline]
fn pull_back_index(
    x: usize,
    y: usize,
    ddf: &DisplacementField,
    w: usize,
    h: usize,
) -> Option<(usize, usize)> {
    let [dx, dy] = ddf.get(x, y);
    let sx = (x as f64 + dx).round();
    let sy = (y as f64 + dy).round();
    if sx < 0.0
        || sy < 0.0
        || sx > (w - 1) as f64
        || sy > (h - 1) as f64
        || !sx.is_finite()
        || !sy.is_finite()
    {
        return None;
    }
    Some((sx as usize, sy as usize))
}

/// Nearest-neighbour transport of a mask through the field:
/// `out(x) = mask(round(x + φ(x)))`. Samples that land outside the mask are
/// unset, so disks pushed off the image vanish instead of smearing the edge.
pub fn warp_mask(mask: &BinaryMask, ddf: &DisplacementField) -> Result<BinaryMask> {
    check_dims(mask.dims(), ddf.dims())?;
    let (w, h) = mask.dims();
    Ok(BinaryMask::from_fn(w, h, |x, y| {
        pull_back_index(x, y, ddf, w, h).is_some_and(|(sx, sy)| mask.get(sx, sy))
    }))
}

/// Fixed-space location where the content of a moving-space point ends up.
pub fn registered_center(point: &MeasurementPoint, ddf: &DisplacementField) -> MeasurementPoint {
    let (x, y) = ddf.invert_point((point.center[0], point.center[1]));
    MeasurementPoint {
        center: [x, y],
        ..*point
    }
}

/// Finds measurement dots by differencing the snapshot with projected dots
/// against the plain snapshot. Centers are component centroids, ordered by
/// `y` then `x`; ids follow that order.
pub fn extract_poi_centers(
    poi_image: &RgbImage,
    base_image: &RgbImage,
) -> Result<Vec<MeasurementPoint>> {
    check_dims(base_image.dims(), poi_image.dims())?;
    let (w, h) = poi_image.dims();
    let diff = BinaryMask::from_fn(w, h, |x, y| {
        let a = poi_image.get(x, y);
        let b = base_image.get(x, y);
        (0..3).map(|k| (a[k] - b[k]).abs()).sum::<f64>() > POI_DIFFERENCE_THRESHOLD
    });
    let comps = connected_components(&diff);
    if comps.is_empty() {
        return Err(Error::NoPoisFound);
    }
    let touching = comps.iter().filter(|c| c.touches_border).count();
    if touching > 0 {
        return Err(Error::AmbiguousPois(touching));
    }
    let mut centers: Vec<(f64, f64)> = comps.iter().map(Component::centroid).collect();
    centers.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)));
    Ok(centers
        .into_iter()
        .enumerate()
        .map(|(id, (x, y))| MeasurementPoint::new(id, x, y, 0.0))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoiFlag {
    /// More than half of the footprint lies on background.
    OffTissue,
    /// No pixel of the footprint survived the transport.
    PoiLost,
    /// The footprint was cut by the image border when rasterized.
    Clipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiLabel {
    pub poi_id: usize,
    pub center_registered: [f64; 2],
    /// Percent of non-background footprint pixels per class; classes absent
    /// from the footprint are omitted.
    pub percentages: BTreeMap<TissueClass, f64>,
    pub pixel_counts: BTreeMap<TissueClass, usize>,
    pub background_fraction: f64,
    pub flags: Vec<PoiFlag>,
}

/// Per-location tissue percentages; serializes as a JSON array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelReport {
    pub entries: Vec<PoiLabel>,
}

impl LabelReport {
    pub fn get(&self, poi_id: usize) -> Option<&PoiLabel> {
        self.entries.iter().find(|e| e.poi_id == poi_id)
    }

    pub fn add_flag(&mut self, poi_id: usize, flag: PoiFlag) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.poi_id == poi_id) {
            if !e.flags.contains(&flag) {
                e.flags.push(flag);
                e.flags.sort();
            }
        }
    }
}

/// Overlays transported footprints with the annotation.
///
/// `points` carry the expected registered centers (fixed-image space). Every
/// connected component of `mask` is attributed to the point whose center is
/// nearest to the component centroid.
pub fn compute_label_percentages(
    mask: &BinaryMask,
    annotation: &AnnotationImage,
    points: &[MeasurementPoint],
) -> Result<LabelReport> {
    check_dims(annotation.dims(), mask.dims())?;
    let mut owned: Vec<Vec<(usize, usize)>> = vec![Vec::new(); points.len()];
    if !points.is_empty() {
        for comp in connected_components(mask) {
            let (cx, cy) = comp.centroid();
            let nearest = points
                .iter()
                .enumerate()
                .map(|(k, p)| (k, (p.center[0] - cx).hypot(p.center[1] - cy)))
                .reduce(|best, cand| if cand.1 < best.1 { cand } else { best })
                .map(|(k, _)| k)
                .unwrap_or(0);
            owned[nearest].extend(comp.pixels);
        }
    }

    let entries = points
        .iter()
        .zip(owned)
        .map(|(point, pixels)| label_footprint(point, &pixels, annotation))
        .collect();
    Ok(LabelReport { entries })
}

fn label_footprint(
    point: &MeasurementPoint,
    pixels: &[(usize, usize)],
    annotation: &AnnotationImage,
) -> PoiLabel {
    let mut counts: BTreeMap<TissueClass, usize> = BTreeMap::new();
    for &(x, y) in pixels {
        *counts.entry(annotation.get(x, y)).or_default() += 1;
    }
    let total = pixels.len();
    let background = counts.get(&TissueClass::Background).copied().unwrap_or(0);
    let tissue = total - background;
    let percentages = counts
        .iter()
        .filter(|(c, _)| **c != TissueClass::Background)
        .map(|(&c, &n)| (c, 100.0 * n as f64 / tissue as f64))
        .collect();

    let mut flags = Vec::new();
    let (center_registered, background_fraction) = if total == 0 {
        flags.push(PoiFlag::PoiLost);
        (point.center, 0.0)
    } else {
        let n = total as f64;
        let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &(x, y)| {
            (sx + x as f64, sy + y as f64)
        });
        let fraction = background as f64 / n;
        if fraction > OFF_TISSUE_FRACTION {
            flags.push(PoiFlag::OffTissue);
        }
        ([sx / n, sy / n], fraction)
    };
    flags.sort();
    PoiLabel {
        poi_id: point.id,
        center_registered,
        percentages,
        pixel_counts: counts,
        background_fraction,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_zero_and_four() {
        let pts = [MeasurementPoint::new(0, 10.0, 10.0, 0.0)];
        let r0 = rasterize_disks(&pts, (30, 30), 0.0);
        assert_eq!(r0.mask.count(), 1);
        assert!(r0.mask.get(10, 10));
        // Gauss circle problem: lattice points with x² + y² ≤ 16.
        let brute = (-4i32..=4)
            .flat_map(|x| (-4i32..=4).map(move |y| (x, y)))
            .filter(|(x, y)| x * x + y * y <= 16)
            .count();
        assert_eq!(brute, 49);
        assert_eq!(rasterize_disks(&pts, (30, 30), 4.0).mask.count(), brute);
    }

    #[test]
    fn overlapping_disks_union() {
        let pts = [
            MeasurementPoint::new(0, 10.0, 10.0, 0.0),
            MeasurementPoint::new(1, 13.0, 10.0, 0.0),
        ];
        let raster = rasterize_disks(&pts, (30, 30), 4.0);
        assert!(raster.mask.count() < 2 * 49);
        assert!(raster.clipped.is_empty());
    }

    #[test]
    fn border_disk_is_clipped() {
        let pts = [MeasurementPoint::new(3, 1.0, 10.0, 0.0)];
        let raster = rasterize_disks(&pts, (30, 30), 4.0);
        assert_eq!(raster.clipped, vec![3]);
        assert!(raster.mask.count() < 49);
    }

    #[test]
    fn warp_mask_identity_and_shift() {
        let pts = [MeasurementPoint::new(0, 20.0, 15.0, 0.0)];
        let mask = rasterize_disks(&pts, (40, 30), 3.0).mask;
        assert_eq!(
            warp_mask(&mask, &DisplacementField::zeros(40, 30)).unwrap(),
            mask
        );
        let moved = warp_mask(&mask, &DisplacementField::constant(40, 30, [5.0, 0.0])).unwrap();
        let comps = connected_components(&moved);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].centroid(), (15.0, 15.0));
        assert_eq!(moved.count(), mask.count());
    }

    #[test]
    fn warp_mask_pushes_disk_off_image() {
        let mask = rasterize_disks(&[MeasurementPoint::new(0, 5.0, 5.0, 0.0)], (20, 20), 2.0).mask;
        let gone = warp_mask(&mask, &DisplacementField::constant(20, 20, [-30.0, 0.0])).unwrap();
        assert_eq!(gone.count(), 0);
        let ann = AnnotationImage::from_fn(20, 20, |_, _| TissueClass::Fat);
        let report =
            compute_label_percentages(&gone, &ann, &[MeasurementPoint::new(0, 35.0, 5.0, 2.0)])
                .unwrap();
        assert_eq!(report.entries[0].flags, vec![PoiFlag::PoiLost]);
        assert!(report.entries[0].percentages.is_empty());
    }

    #[test]
    fn single_class_and_single_pixel() {
        let ann = AnnotationImage::from_fn(30, 30, |x, _| {
            if x < 15 {
                TissueClass::Fat
            } else {
                TissueClass::Dcis
            }
        });
        let pts = [
            MeasurementPoint::new(0, 6.0, 10.0, 4.0),
            MeasurementPoint::new(1, 25.0, 20.0, 0.0),
        ];
        let mask = rasterize_disks(&pts[..1], (30, 30), 4.0).mask;
        let report = compute_label_percentages(&mask, &ann, &pts[..1]).unwrap();
        assert_eq!(
            report.entries[0].percentages,
            BTreeMap::from([(TissueClass::Fat, 100.0)])
        );
        let mask = rasterize_disks(&pts[1..], (30, 30), 0.0).mask;
        let report = compute_label_percentages(&mask, &ann, &pts[1..]).unwrap();
        assert_eq!(
            report.entries[0].percentages,
            BTreeMap::from([(TissueClass::Dcis, 100.0)])
        );
        assert_eq!(report.entries[0].poi_id, 1);
    }

    #[test]
    fn off_tissue_flag() {
        let ann = AnnotationImage::from_fn(30, 30, |x, _| {
            if x < 10 {
                TissueClass::Fat
            } else {
                TissueClass::Background
            }
        });
        let pts = [MeasurementPoint::new(0, 12.0, 15.0, 5.0)];
        let mask = rasterize_disks(&pts, (30, 30), 5.0).mask;
        let entry = &compute_label_percentages(&mask, &ann, &pts)
            .unwrap()
            .entries[0];
        assert_eq!(entry.flags, vec![PoiFlag::OffTissue]);
        assert!(entry.background_fraction > 0.5);
        assert_eq!(entry.percentages.get(&TissueClass::Fat), Some(&100.0));
    }

    #[test]
    fn report_json_shape() {
        let ann = AnnotationImage::from_fn(20, 20, |_, _| TissueClass::Fat);
        let pts = [MeasurementPoint::new(0, 10.0, 10.0, 1.0)];
        let mask = rasterize_disks(&pts, (20, 20), 1.0).mask;
        let json =
            serde_json::to_value(compute_label_percentages(&mask, &ann, &pts).unwrap()).unwrap();
        let entry = &json.as_array().unwrap()[0];
        assert_eq!(entry["poi_id"], 0);
        assert_eq!(entry["center_registered"], serde_json::json!([10.0, 10.0]));
        assert_eq!(entry["percentages"]["fat"], 100.0);
        assert_eq!(entry["background_fraction"], 0.0);
        assert_eq!(entry["flags"], serde_json::json!([]));
    }

    #[test]
    fn majority_downsample() {
        let ann = AnnotationImage::from_fn(4, 4, |x, y| match (x / 2, y / 2) {
            (0, 0) => TissueClass::Fat,
            (1, 0) => TissueClass::Dcis,
            (0, 1) => TissueClass::Connective,
            _ => {
                if x == 3 && y == 3 {
                    TissueClass::Fat
                } else {
                    TissueClass::InvasiveCarcinoma
                }
            }
        });
        let small = ann.downsample_majority((2, 2));
        assert_eq!(small.get(0, 0), TissueClass::Fat);
        assert_eq!(small.get(1, 0), TissueClass::Dcis);
        assert_eq!(small.get(0, 1), TissueClass::Connective);
        assert_eq!(small.get(1, 1), TissueClass::InvasiveCarcinoma);
        assert_eq!(ann.downsample_majority((4, 4)), ann);
        assert_eq!(ann.downsample_majority((8, 8)).get(7, 7), TissueClass::Fat);
    }

    #[test]
    fn extraction_errors() {
        let base = RgbImage::from_fn(20, 20, |_, _| [0.3, 0.2, 0.1]);
        assert!(matches!(
            extract_poi_centers(&base, &base),
            Err(Error::NoPoisFound)
        ));
        let mut poi = base.clone();
        poi.set(0, 5, [1.0, 1.0, 1.0]);
        assert!(matches!(
            extract_poi_centers(&poi, &base),
            Err(Error::AmbiguousPois(1))
        ));
    }
}
