//! On-disk formats.
//!
//! Every JSON file carries `"schema_version": 1`. Raster payloads that are
//! not images (depth frames, displacement fields) are stored as raw
//! little-endian `f32` files next to a JSON header whose `data` entry names
//! the raster relative to the header's directory.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::geometry::DepthFrame;
use crate::labeling::{AnnotationImage, MeasurementPoint, TissueClass, DEFAULT_POI_RADIUS_PX};
use crate::registration::{DisplacementField, GrayImage, RgbImage};

pub const SCHEMA_VERSION: u32 = 1;

/// Display colours of the annotation palette, indexed like [`TissueClass::ALL`].
pub const ANNOTATION_PALETTE: [[u8; 3]; 5] = [
    [255, 255, 255],
    [200, 30, 45],
    [240, 140, 30],
    [230, 150, 190],
    [250, 225, 80],
];

/// Serializes `value` as pretty JSON with a leading `schema_version` field.
pub fn to_versioned_json<T: Serialize>(value: &T) -> Result<String> {
    let inner = serde_json::to_value(value).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut out = Map::new();
    out.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    match inner {
        Value::Object(fields) => {
            for (k, v) in fields {
                if k != "schema_version" {
                    out.insert(k, v);
                }
            }
        }
        other => {
            out.insert("data".into(), other);
        }
    }
    let mut text = serde_json::to_string_pretty(&Value::Object(out)).expect("JSON value");
    text.push('\n');
    Ok(text)
}

/// Inverse of [`to_versioned_json`]. A missing `schema_version` is accepted;
/// any other version is rejected.
pub fn from_versioned_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let value: Value = serde_json::from_str(text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    let Value::Object(mut fields) = value else {
        return Err(Error::format(path, "expected a JSON object"));
    };
    if let Some(v) = fields.remove("schema_version") {
        if v.as_u64() != Some(SCHEMA_VERSION as u64) {
            return Err(Error::format(
                path,
                format!("unsupported schema_version {v}"),
            ));
        }
    }
    let value = match fields.remove("data") {
        Some(inner) if fields.is_empty() && !inner.is_string() => inner,
        Some(inner) => {
            fields.insert("data".into(), inner);
            Value::Object(fields)
        }
        None => Value::Object(fields),
    };
    serde_json::from_value(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_versioned_json(value)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_versioned_json(&text, path)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn read_f32_raster(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = read_bytes(path)?;
    if bytes.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes of f32 data, found {}",
                expected * 4,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn raster_path(header: &Path) -> PathBuf {
    header.with_extension("f32")
}

fn resolve_data(header: &Path, data: &str) -> PathBuf {
    header.parent().unwrap_or(Path::new("")).join(data)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DepthHeader {
    width: usize,
    height: usize,
    pixel_pitch_mm: f64,
    data: String,
}

/// Writes `header` (JSON) and the raster next to it with extension `.f32`.
pub fn write_depth_frame(header: &Path, frame: &DepthFrame) -> Result<()> {
    let raster = raster_path(header);
    write_bytes(&raster, &f32_bytes(frame.depths().iter().copied()))?;
    write_json(
        header,
        &DepthHeader {
            width: frame.width(),
            height: frame.height(),
            pixel_pitch_mm: frame.pixel_pitch(),
            data: file_name(&raster),
        },
    )
}

pub fn read_depth_frame(header: &Path) -> Result<DepthFrame> {
    let h: DepthHeader = read_json(header)?;
    let depths = read_f32_raster(&resolve_data(header, &h.data), h.width * h.height)?;
    DepthFrame::new(h.width, h.height, h.pixel_pitch_mm, depths)
        .map_err(|e| Error::format(header, e.to_string()))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DdfHeader {
    width: usize,
    height: usize,
    units: String,
    layout: String,
    data: String,
}

const DDF_UNITS: &str = "pixels";
const DDF_LAYOUT: &str = "dxdy_interleaved";

pub fn write_ddf(header: &Path, ddf: &DisplacementField) -> Result<()> {
    let raster = raster_path(header);
    write_bytes(&raster, &f32_bytes(ddf.vectors().iter().flatten().copied()))?;
    write_json(
        header,
        &DdfHeader {
            width: ddf.width(),
            height: ddf.height(),
            units: DDF_UNITS.into(),
            layout: DDF_LAYOUT.into(),
            data: file_name(&raster),
        },
    )
}

pub fn read_ddf(header: &Path) -> Result<DisplacementField> {
    let h: DdfHeader = read_json(header)?;
    if h.units != DDF_UNITS || h.layout != DDF_LAYOUT {
        return Err(Error::format(
            header,
            format!("unsupported units/layout {}/{}", h.units, h.layout),
        ));
    }
    let values = read_f32_raster(&resolve_data(header, &h.data), 2 * h.width * h.height)?;
    let vectors = values.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    DisplacementField::new(h.width, h.height, vectors)
        .map_err(|e| Error::format(header, e.to_string()))
}

fn decode_image(bytes: &[u8]) -> Result<image::DynamicImage> {
    Ok(ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(image::ImageError::IoError)?
        .decode()?)
}

fn encode_png(
    width: usize,
    height: usize,
    pixels: &[u8],
    color: ExtendedColorType,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(pixels, width as u32, height as u32, color)?;
    Ok(out)
}

fn is_sixteen_bit(img: &image::DynamicImage) -> bool {
    img.color().bytes_per_pixel() as u16 / img.color().channel_count() as u16 == 2
}

/// Decodes an 8- or 16-bit PNG into `[0, 1]` intensities. Colour input is
/// reduced to its luma channel.
pub fn decode_gray(bytes: &[u8]) -> Result<GrayImage> {
    let img = decode_image(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_sixteen_bit(&img) {
        img.to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect()
    } else {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 255.0)
            .collect()
    };
    GrayImage::new(w, h, data)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    let img = decode_image(bytes)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = if is_sixteen_bit(&img) {
        img.to_rgb16()
            .into_raw()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|v| v as f64 / 65535.0))
            .collect()
    } else {
        img.to_rgb8()
            .into_raw()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|v| v as f64 / 255.0))
            .collect()
    };
    RgbImage::new(w, h, data)
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_gray8(img: &GrayImage) -> Result<Vec<u8>> {
    let px: Vec<u8> = img.data().iter().map(|&v| quantize8(v)).collect();
    encode_png(img.width(), img.height(), &px, ExtendedColorType::L8)
}

pub fn encode_gray16(img: &GrayImage) -> Result<Vec<u8>> {
    let px: Vec<u8> = img
        .data()
        .iter()
        .flat_map(|&v| ((v.clamp(0.0, 1.0) * 65535.0).round() as u16).to_ne_bytes())
        .collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out).write_image(
        &px,
        img.width() as u32,
        img.height() as u32,
        ExtendedColorType::L16,
    )?;
    Ok(out)
}

pub fn encode_rgb8(img: &RgbImage) -> Result<Vec<u8>> {
    let px: Vec<u8> = img.data().iter().flat_map(|p| p.map(quantize8)).collect();
    encode_png(img.width(), img.height(), &px, ExtendedColorType::Rgb8)
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    decode_gray(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    decode_rgb(&read_bytes(path)?).map_err(|e| with_path(e, path))
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_gray8(img)?)
}

pub fn write_gray16(path: &Path, img: &GrayImage) -> Result<()> {
    write_bytes(path, &encode_gray16(img)?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    write_bytes(path, &encode_rgb8(img)?)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Image(err) => Error::format(path, err.to_string()),
        Error::Format { reason, .. } => Error::format(path, reason),
        other => other,
    }
}

/// Palette index to class mapping stored beside an indexed annotation PNG.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationLegend {
    pub classes: std::collections::BTreeMap<String, String>,
}

impl Default for AnnotationLegend {
    fn default() -> Self {
        Self {
            classes: TissueClass::ALL
                .iter()
                .map(|c| (c.index().to_string(), c.name().to_string()))
                .collect(),
        }
    }
}

impl AnnotationLegend {
    fn lookup(&self) -> std::result::Result<[Option<TissueClass>; 256], String> {
        let mut table = [None; 256];
        for (k, v) in &self.classes {
            let index: u8 = k
                .parse()
                .map_err(|_| format!("palette index {k:?} is not in 0..=255"))?;
            let class =
                TissueClass::from_name(v).ok_or_else(|| format!("unknown class name {v:?}"))?;
            table[index as usize] = Some(class);
        }
        Ok(table)
    }
}

/// Sidecar of `h_a.png` is `h_a.classes.json`.
pub fn legend_path(png: &Path) -> PathBuf {
    png.with_extension("classes.json")
}

/// Encodes with the default legend: palette index = [`TissueClass::index`].
pub fn encode_annotation(ann: &AnnotationImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, ann.width() as u32, ann.height() as u32);
        enc.set_color(png::ColorType::Indexed);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_palette(ANNOTATION_PALETTE.concat());
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::InvalidConfig(format!("png: {e}")))?;
        let idx: Vec<u8> = ann.classes().iter().map(|c| c.index() as u8).collect();
        writer
            .write_image_data(&idx)
            .map_err(|e| Error::InvalidConfig(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Decodes an 8-bit indexed (or 8-bit grayscale) PNG whose raw sample
/// values are class indices under `legend`.
pub fn decode_annotation(bytes: &[u8], legend: &AnnotationLegend) -> Result<AnnotationImage> {
    let fail = |reason: String| Error::format("<annotation>", reason);
    let table = legend.lookup().map_err(fail)?;
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| fail(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| fail("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| fail(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(
            info.color_type,
            png::ColorType::Indexed | png::ColorType::Grayscale
        )
    {
        return Err(fail(format!(
            "expected an 8-bit indexed PNG, found {:?} {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut classes = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks_exact(info.line_size) {
        for &v in &row[..w] {
            classes.push(
                table[v as usize].ok_or_else(|| fail(format!("palette index {v} has no class")))?,
            );
        }
    }
    AnnotationImage::new(w, h, classes)
}

/// Writes the indexed PNG and its legend sidecar.
pub fn write_annotation(path: &Path, ann: &AnnotationImage) -> Result<()> {
    write_bytes(path, &encode_annotation(ann)?)?;
    write_json(&legend_path(path), &AnnotationLegend::default())
}

/// Reads an annotation; the sidecar is optional and defaults to the
/// standard legend.
pub fn read_annotation(path: &Path) -> Result<AnnotationImage> {
    let sidecar = legend_path(path);
    let legend = if sidecar.exists() {
        read_json(&sidecar)?
    } else {
        AnnotationLegend::default()
    };
    decode_annotation(&read_bytes(path)?, &legend).map_err(|e| with_path(e, path))
}

/// Measurement locations as exchanged with the UI and written by the
/// simulator: centers in working-resolution pixels plus one shared radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoiSet {
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub centers: Vec<[f64; 2]>,
}

fn default_radius() -> f64 {
    DEFAULT_POI_RADIUS_PX
}

impl PoiSet {
    pub fn from_points(points: &[MeasurementPoint], radius: f64) -> Self {
        Self {
            radius,
            centers: points.iter().map(|p| p.center).collect(),
        }
    }

    /// Points numbered in list order.
    pub fn points(&self) -> Vec<MeasurementPoint> {
        self.centers
            .iter()
            .enumerate()
            .map(|(id, c)| MeasurementPoint::new(id, c[0], c[1], self.radius))
            .collect()
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        for p in self.points() {
            if !p.in_bounds(dims) {
                return Err(Error::PoiOutOfBounds {
                    index: p.id,
                    x: p.center[0],
                    y: p.center[1],
                    width: dims.0,
                    height: dims.1,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Correspondence;
    use crate::geometry::{CorrespondenceSet, PlaneModel, Point3, RigidTransform};

    #[test]
    fn versioned_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plane.json");
        let plane = PlaneModel::new(0.1 + 0.2, -1.0 / 3.0, -500.123456789012);
        write_json(&path, &plane).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema_version\": 1"));
        assert_eq!(read_json::<PlaneModel>(&path).unwrap(), plane);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let err = from_versioned_json::<PlaneModel>(
            r#"{"schema_version":2,"a":0,"b":0,"c":0}"#,
            Path::new("x"),
        );
        assert!(matches!(err, Err(Error::Format { .. })));
    }

    #[test]
    fn transform_and_correspondences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = RigidTransform::from_euler(0.1, -0.2, 0.3, Point3::new(1.0, 2.0, 3.0).to_vector());
        write_json(&dir.path().join("t.json"), &t).unwrap();
        let back: RigidTransform = read_json(&dir.path().join("t.json")).unwrap();
        assert_eq!(back, t);

        let set = CorrespondenceSet::new(vec![Correspondence {
            camera: Point3::new(1.0, 2.0, 3.0),
            projector: Point3::new(4.0, 5.0, 6.0),
        }]);
        write_json(&dir.path().join("c.json"), &set).unwrap();
        assert_eq!(
            read_json::<CorrespondenceSet>(&dir.path().join("c.json")).unwrap(),
            set
        );
    }

    #[test]
    fn depth_frame_round_trip_keeps_nan() {
        let dir = tempfile::tempdir().unwrap();
        let mut depths: Vec<f64> = (0..12).map(|i| 500.0 + i as f64 * 0.25).collect();
        depths[5] = f64::NAN;
        let frame = DepthFrame::new(4, 3, 1.5, depths).unwrap();
        let header = dir.path().join("frame_00.json");
        write_depth_frame(&header, &frame).unwrap();
        assert!(dir.path().join("frame_00.f32").exists());
        let back = read_depth_frame(&header).unwrap();
        assert_eq!(back.dims(), (4, 3));
        assert_eq!(back.pixel_pitch(), 1.5);
        assert_eq!(back.get(1, 1), None);
        assert_eq!(back.get(0, 0), Some(500.0));
        assert_eq!(back.get(3, 2), Some(502.75));
    }

    #[test]
    fn truncated_raster_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("f.json");
        write_depth_frame(&header, &DepthFrame::new(2, 2, 1.0, vec![1.0; 4]).unwrap()).unwrap();
        fs::write(dir.path().join("f.f32"), [0u8; 7]).unwrap();
        assert!(matches!(
            read_depth_frame(&header),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn ddf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ddf = DisplacementField::from_fn(5, 4, |x, y| [x as f64 * 0.5, -(y as f64) * 0.25]);
        let header = dir.path().join("ddf.json");
        write_ddf(&header, &ddf).unwrap();
        let v: Value = serde_json::from_str(&fs::read_to_string(&header).unwrap()).unwrap();
        assert_eq!(v["layout"], "dxdy_interleaved");
        assert_eq!(v["units"], "pixels");
        assert_eq!(
            fs::metadata(dir.path().join("ddf.f32")).unwrap().len(),
            5 * 4 * 2 * 4
        );
        assert_eq!(read_ddf(&header).unwrap(), ddf);
    }

    #[test]
    fn gray_png_round_trips_at_both_depths() {
        let img = GrayImage::from_fn(7, 5, |x, y| ((x * 5 + y) * 7 % 256) as f64 / 255.0);
        let back = decode_gray(&encode_gray8(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let img16 = GrayImage::from_fn(7, 5, |x, y| ((x * 9001 + y * 13) % 65536) as f64 / 65535.0);
        let back16 = decode_gray(&encode_gray16(&img16).unwrap()).unwrap();
        assert_eq!(back16, img16);
    }

    #[test]
    fn rgb_png_round_trip() {
        let img = RgbImage::from_fn(6, 4, |x, y| [x as f64 / 255.0, y as f64 / 255.0, 1.0]);
        assert_eq!(decode_rgb(&encode_rgb8(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn annotation_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let ann = AnnotationImage::from_fn(9, 7, |x, y| TissueClass::ALL[(x + 2 * y) % 5]);
        let path = dir.path().join("h_a.png");
        write_annotation(&path, &ann).unwrap();
        let legend: Value =
            serde_json::from_str(&fs::read_to_string(legend_path(&path)).unwrap()).unwrap();
        assert_eq!(legend["classes"]["2"], "DCIS");
        assert_eq!(legend["schema_version"], 1);
        assert_eq!(read_annotation(&path).unwrap(), ann);
    }

    #[test]
    fn custom_legend_remaps_indices() {
        let ann = AnnotationImage::from_fn(2, 1, |x, _| TissueClass::ALL[x]);
        let bytes = encode_annotation(&ann).unwrap();
        let mut legend = AnnotationLegend::default();
        legend.classes.insert("0".into(), "fat".into());
        let back = decode_annotation(&bytes, &legend).unwrap();
        assert_eq!(back.get(0, 0), TissueClass::Fat);
        assert_eq!(back.get(1, 0), TissueClass::InvasiveCarcinoma);
    }

    #[test]
    fn unmapped_index_rejected() {
        let ann = AnnotationImage::from_fn(2, 1, |_, _| TissueClass::Fat);
        let legend = AnnotationLegend {
            classes: [("0".to_string(), "background".to_string())]
                .into_iter()
                .collect(),
        };
        assert!(decode_annotation(&encode_annotation(&ann).unwrap(), &legend).is_err());
    }

    #[test]
    fn poi_set_defaults_radius_and_checks_bounds() {
        let set: PoiSet = serde_json::from_str(r#"{"centers": [[1, 2], [3.5, 4]]}"#).unwrap();
        assert_eq!(set.radius, DEFAULT_POI_RADIUS_PX);
        let pts = set.points();
        assert_eq!(pts[1].id, 1);
        assert_eq!(pts[1].center, [3.5, 4.0]);
        assert!(set.validate((10, 10)).is_ok());
        assert!(matches!(
            set.validate((3, 3)),
            Err(Error::PoiOutOfBounds { index: 1, .. })
        ));
    }

    #[test]
    fn not_a_png_is_an_error() {
        assert!(decode_gray(b"definitely not an image").is_err());
        assert!(decode_annotation(b"nope", &AnnotationLegend::default()).is_err());
    }
}
