//! Writes a synthetic scenario directory that `run` can consume directly.

use std::path::{Path, PathBuf};

use ppm_core::io::{self, PoiSet};
use ppm_core::registration::WORKING_DIMS;
use ppm_core::simulator::{
    generate_checkerboard_correspondences, generate_depth_scene, generate_phantom_pair,
    random_poi_layout, render_poi_image, PhantomConfig, ScenarioConfig,
};
use ppm_core::Result;

use crate::config::PipelineConfig;

/// Measurement locations placed on each phantom.
pub const PHANTOM_POI_COUNT: usize = 6;

/// Layout of a scenario directory, relative to its root.
pub mod layout {
    pub const SCENARIO: &str = "scenario.json";
    pub const CONFIG: &str = "config.json";
    pub const DEPTH_DIR: &str = "depth";
    pub const PLANE_TRUTH: &str = "plane_truth.json";
    pub const CORRESPONDENCES: &str = "correspondences.json";
    pub const TRANSFORM_TRUTH: &str = "transform_truth.json";
    pub const S_O: &str = "phantom/s_o.png";
    pub const S_POI: &str = "phantom/s_poi.png";
    pub const H_O: &str = "phantom/h_o.png";
    pub const H_A: &str = "phantom/h_a.png";
    pub const SPECIMEN_CLASSES: &str = "phantom/specimen_classes.png";
    pub const TRUTH_DDF: &str = "phantom/truth_ddf.json";
    pub const POIS: &str = "phantom/pois.json";
    pub const OUT_DIR: &str = "out";
}

/// Depth frame header name for frame `i`.
pub fn depth_frame_name(i: usize) -> String {
    format!("{}/frame_{i:03}.json", layout::DEPTH_DIR)
}

/// Default scenario for `seed`: the phantom layout is drawn from the seed too.
pub fn scenario_for_seed(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        phantom: PhantomConfig::random_layout(WORKING_DIMS, seed),
        ..Default::default()
    }
}

/// Generates every artifact of `scenario` below `root` and returns the path
/// of the `run` configuration.
pub fn write_scenario(
    root: &Path,
    scenario: &ScenarioConfig,
    poi_radius_px: f64,
) -> Result<PathBuf> {
    scenario.validate()?;
    io::write_json(&root.join(layout::SCENARIO), scenario)?;

    let (frames, plane) = generate_depth_scene(scenario)?;
    for (i, frame) in frames.iter().enumerate() {
        io::write_depth_frame(&root.join(depth_frame_name(i)), frame)?;
    }
    io::write_json(&root.join(layout::PLANE_TRUTH), &plane)?;

    let (pairs, truth) = generate_checkerboard_correspondences(scenario)?;
    io::write_json(&root.join(layout::CORRESPONDENCES), &pairs)?;
    io::write_json(&root.join(layout::TRANSFORM_TRUTH), &truth)?;

    let phantom = generate_phantom_pair(&scenario.phantom, scenario.seed)?;
    let pois = random_poi_layout(
        &phantom.specimen_classes,
        PHANTOM_POI_COUNT,
        poi_radius_px,
        4.0,
        scenario.seed,
    );
    let dots = render_poi_image(&phantom.specimen_image, &pois)?;
    io::write_rgb(&root.join(layout::S_O), &phantom.specimen_image)?;
    io::write_rgb(&root.join(layout::S_POI), &dots)?;
    io::write_gray(&root.join(layout::H_O), &phantom.histology_image)?;
    io::write_annotation(&root.join(layout::H_A), &phantom.annotation)?;
    io::write_annotation(
        &root.join(layout::SPECIMEN_CLASSES),
        &phantom.specimen_classes,
    )?;
    io::write_ddf(&root.join(layout::TRUTH_DDF), &phantom.truth_ddf)?;
    io::write_json(
        &root.join(layout::POIS),
        &PoiSet::from_points(&pois, poi_radius_px),
    )?;

    let config = PipelineConfig {
        schema_version: 1,
        s_o: layout::S_O.into(),
        s_poi: Some(layout::S_POI.into()),
        pois: None,
        h_o: layout::H_O.into(),
        h_a: layout::H_A.into(),
        out_dir: layout::OUT_DIR.into(),
        poi_radius_px,
        registration: Default::default(),
        fixed_image_role: Default::default(),
        seed: scenario.seed,
    };
    let config_path = root.join(layout::CONFIG);
    io::write_json(&config_path, &config)?;
    Ok(config_path)
}
