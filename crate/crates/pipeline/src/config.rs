use std::fmt;
use std::path::{Path, PathBuf};

use ppm_core::labeling::DEFAULT_POI_RADIUS_PX;
use ppm_core::registration::RegistrationConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Which image the registration holds still. The other one is warped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedImageRole {
    #[default]
    Histology,
    Specimen,
}

/// Processing parameters shared by the CLI and the HTTP service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Probe footprint radius at working resolution.
    pub poi_radius_px: f64,
    pub registration: RegistrationConfig,
    pub fixed_image_role: FixedImageRole,
    /// Overrides `registration.seed`.
    pub seed: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            poi_radius_px: default_radius(),
            registration: RegistrationConfig::default(),
            fixed_image_role: FixedImageRole::Histology,
            seed: 0,
        }
    }
}

impl Settings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.poi_radius_px.is_finite() && self.poi_radius_px > 0.0) {
            return Err(ConfigError::invalid(
                "poi_radius_px",
                format!("must be > 0, got {}", self.poi_radius_px),
            ));
        }
        self.registration
            .validate()
            .map_err(|e| ConfigError::invalid("registration", e.to_string()))
    }

    /// Registration parameters with the pipeline seed applied.
    pub fn registration(&self) -> RegistrationConfig {
        RegistrationConfig {
            seed: self.seed,
            ..self.registration.clone()
        }
    }
}

/// A `run` configuration file. Relative paths resolve against the directory
/// holding the file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    /// Specimen snapshot without dots.
    pub s_o: PathBuf,
    /// Specimen snapshot with projected dots. Exactly one of `s_poi` and
    /// `pois` must be given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_poi: Option<PathBuf>,
    /// JSON list of measurement locations in working-resolution pixels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pois: Option<PathBuf>,
    /// Histology section.
    pub h_o: PathBuf,
    /// Annotated histology as an indexed PNG with a `.classes.json` sidecar.
    pub h_a: PathBuf,
    pub out_dir: PathBuf,
    #[serde(default = "default_radius")]
    pub poi_radius_px: f64,
    #[serde(default)]
    pub registration: RegistrationConfig,
    #[serde(default)]
    pub fixed_image_role: FixedImageRole,
    #[serde(default)]
    pub seed: u64,
}

fn default_radius() -> f64 {
    DEFAULT_POI_RADIUS_PX
}

fn schema_version() -> u32 {
    1
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut config: PipelineConfig = parse_json(&text)?;
        config.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve(base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != 1 {
            return Err(ConfigError::invalid(
                "schema_version",
                format!("unsupported version {}", self.schema_version),
            ));
        }
        match (&self.s_poi, &self.pois) {
            (Some(_), Some(_)) => Err(ConfigError::invalid(
                "pois",
                "give either s_poi or pois, not both",
            )),
            (None, None) => Err(ConfigError::invalid(
                "s_poi",
                "one of s_poi or pois is required",
            )),
            _ => self.settings().validate(),
        }
    }

    pub fn settings(&self) -> Settings {
        Settings {
            poi_radius_px: self.poi_radius_px,
            registration: self.registration.clone(),
            fixed_image_role: self.fixed_image_role,
            seed: self.seed,
        }
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.s_o);
        join(&mut self.h_o);
        join(&mut self.h_a);
        join(&mut self.out_dir);
        if let Some(p) = &mut self.s_poi {
            join(p);
        }
        if let Some(p) = &mut self.pois {
            join(p);
        }
    }
}

/// Parses JSON, reporting the dotted path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::Invalid {
            field: if path == "." { String::new() } else { path },
            reason: e.into_inner().to_string(),
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read { path: PathBuf, reason: String },
    Invalid { field: String, reason: String },
}

impl ConfigError {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, reason } => {
                write!(f, "cannot read config {}: {reason}", path.display())
            }
            ConfigError::Invalid { field, reason } if field.is_empty() => {
                write!(f, "invalid config: {reason}")
            }
            ConfigError::Invalid { field, reason } => {
                write!(f, "invalid config field `{field}`: {reason}")
            }
        }
    }
}

impl std::error::Error for ConfigError {}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str =
        r#"{"s_o": "a.png", "s_poi": "b.png", "h_o": "c.png", "h_a": "d.png", "out_dir": "out"}"#;

    #[test]
    fn defaults_fill_in() {
        let c: PipelineConfig = parse_json(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.settings(), Settings::default());
    }

    #[test]
    fn unknown_nested_field_is_named() {
        let text = MINIMAL.replace("}", r#", "registration": {"mi_binz": 4}}"#);
        let err = parse_json::<PipelineConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("mi_binz"), "{err}");
    }

    #[test]
    fn wrong_type_names_the_path() {
        let text = MINIMAL.replace("}", r#", "registration": {"mi_bins": "many"}}"#);
        let err = parse_json::<PipelineConfig>(&text).unwrap_err();
        assert!(err.to_string().contains("registration.mi_bins"), "{err}");
    }

    #[test]
    fn bad_values_name_the_field() {
        let text = MINIMAL.replace("}", r#", "poi_radius_px": 0}"#);
        let c: PipelineConfig = parse_json(&text).unwrap();
        assert!(c
            .validate()
            .unwrap_err()
            .to_string()
            .contains("poi_radius_px"));
        let text = MINIMAL.replace("}", r#", "registration": {"mi_bins": 1}}"#);
        let c: PipelineConfig = parse_json(&text).unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("mi_bins"));
    }

    #[test]
    fn poi_source_must_be_unique() {
        let both = MINIMAL.replace("}", r#", "pois": "p.json"}"#);
        assert!(parse_json::<PipelineConfig>(&both)
            .unwrap()
            .validate()
            .is_err());
        let none = MINIMAL.replace(r#""s_poi": "b.png", "#, "");
        assert!(parse_json::<PipelineConfig>(&none)
            .unwrap()
            .validate()
            .is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, MINIMAL).unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert_eq!(c.s_o, dir.path().join("a.png"));
        assert_eq!(c.out_dir, dir.path().join("out"));
    }

    #[test]
    fn pipeline_seed_overrides_registration_seed() {
        let s = Settings {
            seed: 9,
            ..Default::default()
        };
        assert_eq!(s.registration().seed, 9);
    }
}
