//! The measurement workflow as separately callable stages.
//!
//! Both the `run` command and the HTTP service drive these functions and
//! write through [`Artifacts`], so identical inputs produce identical files.

use std::fmt;
use std::path::{Path, PathBuf};

use ppm_core::io::{self, PoiSet};
use ppm_core::labeling::{
    compute_label_percentages, extract_poi_centers, rasterize_disks, registered_center, warp_mask,
    AnnotationImage, BinaryMask, LabelReport, MeasurementPoint, PoiFlag,
};
use ppm_core::registration::{
    estimate_ddf, resize, saturation_channel, to_grayscale, DisplacementField, GrayImage,
    RegistrationMetrics, RegistrationResult, RgbImage,
};
use ppm_core::Error;

use crate::config::{FixedImageRole, PipelineConfig, Settings};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Load,
    Convert,
    Register,
    Labels,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Convert => "convert",
            Stage::Register => "register",
            Stage::Labels => "labels",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage `{}` failed: {}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

trait InStage<T> {
    fn stage(self, stage: Stage) -> Result<T, StageError>;
}

impl<T> InStage<T> for Result<T, Error> {
    fn stage(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|source| StageError { stage, source })
    }
}

/// Where the measurement locations come from.
#[derive(Clone, Debug, PartialEq)]
pub enum PoiSource {
    /// Snapshot with projected dots, compared against the plain snapshot.
    Image(RgbImage),
    /// Centers already in working-resolution pixels.
    Points(PoiSet),
}

/// File names inside an output (or session) directory.
pub mod files {
    pub const SPECIMEN_SATURATION: &str = "specimen_saturation.png";
    pub const HISTOLOGY_GRAY: &str = "histology_gray.png";
    pub const DDF: &str = "ddf.json";
    pub const WARPED: &str = "warped.png";
    pub const REGISTRATION: &str = "registration.json";
    pub const POI_CENTERS: &str = "poi_centers.json";
    pub const POI_MASK: &str = "poi_mask.png";
    pub const POI_MASK_REGISTERED: &str = "poi_mask_registered.png";
    pub const ANNOTATION_WORKING: &str = "annotation_working.png";
    pub const LABELS: &str = "labels.json";
}

/// Writes stage outputs below one directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write_converted(&self, converted: &Converted) -> Result<(), Error> {
        io::write_gray(&self.path(files::SPECIMEN_SATURATION), &converted.specimen)?;
        io::write_gray(&self.path(files::HISTOLOGY_GRAY), &converted.histology)
    }

    pub fn write_registration(&self, reg: &Registration) -> Result<(), Error> {
        io::write_ddf(&self.path(files::DDF), &reg.result.ddf)?;
        io::write_gray(&self.path(files::WARPED), &reg.result.warped)?;
        io::write_json(&self.path(files::REGISTRATION), &reg.metrics)
    }

    pub fn write_labels(&self, labels: &Labels) -> Result<(), Error> {
        io::write_json(&self.path(files::POI_CENTERS), &labels.pois)?;
        io::write_bytes(&self.path(files::POI_MASK), &encode_mask(&labels.disks)?)?;
        io::write_bytes(
            &self.path(files::POI_MASK_REGISTERED),
            &encode_mask(&labels.transported)?,
        )?;
        io::write_annotation(&self.path(files::ANNOTATION_WORKING), &labels.annotation)?;
        io::write_bytes(&self.path(files::LABELS), &report_json(&labels.report))
    }

    /// The displacement field as persisted (single precision).
    pub fn read_ddf(&self) -> Result<DisplacementField, Error> {
        io::read_ddf(&self.path(files::DDF))
    }
}

fn encode_mask(mask: &BinaryMask) -> Result<Vec<u8>, Error> {
    let (w, h) = mask.dims();
    io::encode_gray8(&GrayImage::from_fn(w, h, |x, y| {
        if mask.get(x, y) {
            1.0
        } else {
            0.0
        }
    }))
}

/// The report exactly as written to `labels.json`.
pub fn report_json(report: &LabelReport) -> Vec<u8> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text.into_bytes()
}

/// Both images reduced to one channel at working resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Converted {
    /// Saturation channel of the specimen snapshot.
    pub specimen: GrayImage,
    /// Luminance of the histology section.
    pub histology: GrayImage,
}

pub fn convert(specimen: &RgbImage, histology: &RgbImage, settings: &Settings) -> Converted {
    let dims = settings.registration.working_dims;
    Converted {
        specimen: resize(&saturation_channel(specimen), dims),
        histology: resize(&to_grayscale(histology), dims),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Registration {
    pub result: RegistrationResult,
    pub metrics: RegistrationMetrics,
}

/// Registers the moving image onto the fixed one, per `fixed_image_role`.
pub fn register(converted: &Converted, settings: &Settings) -> Result<Registration, Error> {
    let config = settings.registration();
    let (fixed, moving) = match settings.fixed_image_role {
        FixedImageRole::Histology => (&converted.histology, &converted.specimen),
        FixedImageRole::Specimen => (&converted.specimen, &converted.histology),
    };
    let result = estimate_ddf(fixed, moving, &config)?;
    let metrics = result.metrics(&config);
    Ok(Registration { result, metrics })
}

/// Rounds every component through `f32`, matching the on-disk field, so that
/// labels computed right after registration equal labels computed later from
/// the saved field.
pub fn as_persisted(ddf: &DisplacementField) -> DisplacementField {
    let (w, h) = ddf.dims();
    DisplacementField::from_fn(w, h, |x, y| ddf.get(x, y).map(|v| v as f32 as f64))
}

/// Measurement locations in working-resolution pixels.
pub fn locate_pois(
    source: &PoiSource,
    specimen: &RgbImage,
    settings: &Settings,
) -> Result<PoiSet, Error> {
    let dims = settings.registration.working_dims;
    let set = match source {
        PoiSource::Points(set) => PoiSet {
            radius: settings.poi_radius_px,
            centers: set.centers.clone(),
        },
        PoiSource::Image(poi_image) => {
            let found = extract_poi_centers(poi_image, specimen)?;
            let (sw, sh) = specimen.dims();
            let (kx, ky) = (dims.0 as f64 / sw as f64, dims.1 as f64 / sh as f64);
            PoiSet {
                radius: settings.poi_radius_px,
                centers: found
                    .iter()
                    .map(|p| {
                        [
                            (p.center[0] + 0.5) * kx - 0.5,
                            (p.center[1] + 0.5) * ky - 0.5,
                        ]
                    })
                    .collect(),
            }
        }
    };
    set.validate(dims)?;
    Ok(set)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub pois: PoiSet,
    /// Probe disks in specimen space.
    pub disks: BinaryMask,
    /// Disks in the space where they meet the annotation.
    pub transported: BinaryMask,
    /// Annotation in that same space.
    pub annotation: AnnotationImage,
    pub report: LabelReport,
}

/// Transports the probe disks through `ddf` and reads tissue percentages
/// from the annotation.
pub fn extract_labels(
    pois: &PoiSet,
    annotation: &AnnotationImage,
    ddf: &DisplacementField,
    settings: &Settings,
) -> Result<Labels, Error> {
    let dims = settings.registration.working_dims;
    if ddf.dims() != dims {
        return Err(Error::DimensionMismatch {
            expected: dims,
            found: ddf.dims(),
        });
    }
    let points: Vec<MeasurementPoint> = pois.points();
    let raster = rasterize_disks(&points, dims, settings.poi_radius_px);
    let histology_annotation = annotation.downsample_majority(dims);
    let (transported, annotation, centers) = match settings.fixed_image_role {
        FixedImageRole::Histology => {
            let centers: Vec<MeasurementPoint> =
                points.iter().map(|p| registered_center(p, ddf)).collect();
            (warp_mask(&raster.mask, ddf)?, histology_annotation, centers)
        }
        FixedImageRole::Specimen => (
            raster.mask.clone(),
            histology_annotation.warped(ddf)?,
            points,
        ),
    };
    let mut report = compute_label_percentages(&transported, &annotation, &centers)?;
    for &id in &raster.clipped {
        report.add_flag(id, PoiFlag::Clipped);
    }
    Ok(Labels {
        pois: pois.clone(),
        disks: raster.mask,
        transported,
        annotation,
        report,
    })
}

/// Gray blend `alpha·warped + (1 − alpha)·fixed`.
pub fn overlay(fixed: &GrayImage, warped: &GrayImage, alpha: f64) -> Result<GrayImage, Error> {
    if fixed.dims() != warped.dims() {
        return Err(Error::DimensionMismatch {
            expected: fixed.dims(),
            found: warped.dims(),
        });
    }
    let a = alpha.clamp(0.0, 1.0);
    Ok(GrayImage::from_fn(fixed.width(), fixed.height(), |x, y| {
        if a == 0.0 {
            fixed.get(x, y)
        } else {
            a * warped.get(x, y) + (1.0 - a) * fixed.get(x, y)
        }
    }))
}

/// The fixed image as written by the convert stage.
pub fn fixed_image_file(role: FixedImageRole) -> &'static str {
    match role {
        FixedImageRole::Histology => files::HISTOLOGY_GRAY,
        FixedImageRole::Specimen => files::SPECIMEN_SATURATION,
    }
}

/// Everything `run` reads.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub specimen: RgbImage,
    pub pois: PoiSource,
    pub histology: RgbImage,
    pub annotation: AnnotationImage,
}

impl Inputs {
    pub fn load(config: &PipelineConfig) -> Result<Self, StageError> {
        let specimen = io::read_rgb(&config.s_o).stage(Stage::Load)?;
        let pois = match (&config.s_poi, &config.pois) {
            (Some(path), _) => PoiSource::Image(io::read_rgb(path).stage(Stage::Load)?),
            (None, Some(path)) => PoiSource::Points(io::read_json(path).stage(Stage::Load)?),
            (None, None) => {
                return Err(StageError {
                    stage: Stage::Load,
                    source: Error::InvalidConfig("s_poi: one of s_poi or pois is required".into()),
                })
            }
        };
        Ok(Self {
            specimen,
            pois,
            histology: io::read_rgb(&config.h_o).stage(Stage::Load)?,
            annotation: io::read_annotation(&config.h_a).stage(Stage::Load)?,
        })
    }
}

/// Registration half of the workflow: convert, estimate the field, write
/// `specimen_saturation.png`, `histology_gray.png`, `ddf.json`, `warped.png`
/// and `registration.json`.
pub fn run_registration(
    specimen: &RgbImage,
    histology: &RgbImage,
    settings: &Settings,
    out: &Artifacts,
) -> Result<Registration, StageError> {
    let converted = convert(specimen, histology, settings);
    out.write_converted(&converted).stage(Stage::Convert)?;
    let reg = register(&converted, settings).stage(Stage::Register)?;
    out.write_registration(&reg).stage(Stage::Register)?;
    Ok(reg)
}

/// Labeling half: locate the POIs, transport them through the saved field
/// and write the label artifacts.
pub fn run_labels(
    specimen: &RgbImage,
    pois: &PoiSource,
    annotation: &AnnotationImage,
    ddf: &DisplacementField,
    settings: &Settings,
    out: &Artifacts,
) -> Result<Labels, StageError> {
    let set = locate_pois(pois, specimen, settings).stage(Stage::Labels)?;
    let labels =
        extract_labels(&set, annotation, &as_persisted(ddf), settings).stage(Stage::Labels)?;
    out.write_labels(&labels).stage(Stage::Labels)?;
    Ok(labels)
}

/// Full workflow. Artifacts of completed stages stay on disk when a later
/// stage fails.
pub fn run_pipeline(
    config: &PipelineConfig,
) -> Result<(RegistrationResult, LabelReport), StageError> {
    let settings = config.settings();
    settings.validate().map_err(|e| StageError {
        stage: Stage::Load,
        source: Error::InvalidConfig(e.to_string()),
    })?;
    let inputs = Inputs::load(config)?;
    let out = Artifacts::new(&config.out_dir);
    let reg = run_registration(&inputs.specimen, &inputs.histology, &settings, &out)?;
    let labels = run_labels(
        &inputs.specimen,
        &inputs.pois,
        &inputs.annotation,
        &reg.result.ddf,
        &settings,
        &out,
    )?;
    Ok((reg.result, labels.report))
}
