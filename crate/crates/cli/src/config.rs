use std::net::IpAddr;
use std::path::{Path, PathBuf};

use neurofind_core::anatomy::AnatomyScheme;
use neurofind_core::llm::LlmConfig;
use neurofind_core::reportgen::{TemplateVariant, Tolerances};
use neurofind_core::vasari::FeatureConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("{0} must be positive")]
    NonPositive(String),
    #[error("{field} must lie in {range}")]
    OutOfRange { field: String, range: &'static str },
    #[error("{0} is required (set it in the config file or pass the flag)")]
    Missing(&'static str),
    #[error("{what} {path} does not exist")]
    NoSuchPath { what: &'static str, path: PathBuf },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// One sub-directory per case.
    pub cases_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Atlas-space midline mask, warped per case by `field.nii[.gz]`.
    pub atlas_midline: Option<PathBuf>,
    /// TOML anatomy scheme; SynthSeg + Desikan-Killiany when unset.
    pub anatomy_scheme: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Offline renderer that reads the metadata back out of the prompt.
    Template,
    /// OpenAI-compatible chat-completions server from `[llm]`.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub backend: BackendKind,
    pub template: TemplateVariant,
    /// Replaces the bundled template body; must hold each placeholder once.
    pub template_file: Option<PathBuf>,
    /// Directory of `.txt` example findings for in-context learning.
    pub examples_dir: Option<PathBuf>,
    pub tolerances: Tolerances,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            backend: BackendKind::Template,
            template: TemplateVariant::Full,
            template_file: None,
            examples_dir: None,
            tolerances: Tolerances::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewSection {
    pub data_dir: Option<PathBuf>,
    pub bind: IpAddr,
    pub port: u16,
    /// Framework ids in registry order; each case holds `reports/<id>.txt`.
    pub frameworks: Vec<String>,
    /// HMAC key for session tokens; random per process when unset.
    pub token_secret: Option<String>,
}

impl Default for ReviewSection {
    fn default() -> Self {
        ReviewSection {
            data_dir: None,
            bind: IpAddr::from([127, 0, 0, 1]),
            port: 8080,
            frameworks: Vec::new(),
            token_secret: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub jobs: usize,
    pub paths: PathsConfig,
    pub features: FeatureConfig,
    pub generation: GenerationConfig,
    pub llm: LlmConfig,
    pub review: ReviewSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            jobs: 1,
            paths: PathsConfig::default(),
            features: FeatureConfig::default(),
            generation: GenerationConfig::default(),
            llm: LlmConfig::default(),
            review: ReviewSection::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::NonPositive(name.to_string()))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let f = &self.features;
        if self.jobs == 0 {
            return Err(ConfigError::NonPositive("jobs".into()));
        }
        for (name, v) in [
            ("features.min_lesion_ml", f.min_lesion_ml),
            ("features.q_mild", f.q_mild),
            ("features.thick_margin_mm", f.thick_margin_mm),
            ("features.v_min_ml", f.v_min_ml),
            ("features.sat_max_ml", f.sat_max_ml),
            ("features.deep_wm_mm", f.deep_wm_mm),
            ("features.side_fraction", f.side_fraction),
            ("features.crossing_min_ml", f.crossing_min_ml),
            ("features.location_min_fraction", f.location_min_fraction),
            ("features.location_max_regions", f.location_max_regions as f64),
            ("features.ventricles.asymmetry_ratio", f.ventricles.asymmetry_ratio),
            ("features.ventricles.enlargement_ratio", f.ventricles.enlargement_ratio),
            ("generation.tolerances.mm", self.generation.tolerances.mm),
            ("generation.tolerances.cm", self.generation.tolerances.cm),
            ("generation.tolerances.ml_rel", self.generation.tolerances.ml_rel),
            ("generation.tolerances.minimal_shift_mm", self.generation.tolerances.minimal_shift_mm),
            ("llm.timeout_secs", self.llm.timeout_secs as f64),
            ("llm.max_attempts", self.llm.max_attempts as f64),
            ("llm.max_in_flight", self.llm.max_in_flight as f64),
        ] {
            positive(name, v)?;
        }
        if let Some(v) = f.atlas_ventricle_ml {
            positive("features.atlas_ventricle_ml", v)?;
        }
        for (name, v) in [
            ("features.q_mild", f.q_mild),
            ("features.side_fraction", f.side_fraction),
            ("features.location_min_fraction", f.location_min_fraction),
        ] {
            if v > 1.0 {
                return Err(ConfigError::OutOfRange {
                    field: name.into(),
                    range: "(0, 1]",
                });
            }
        }
        if !(0.0..=2.0).contains(&self.llm.temperature) {
            return Err(ConfigError::OutOfRange {
                field: "llm.temperature".into(),
                range: "[0, 2]",
            });
        }
        if f.v_min_ml > f.sat_max_ml {
            return Err(ConfigError::Invalid(
                "features.v_min_ml must not exceed features.sat_max_ml".into(),
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn anatomy_scheme(&self) -> Result<AnatomyScheme, ConfigError> {
        match &self.paths.anatomy_scheme {
            None => Ok(AnatomyScheme::synthseg_dk()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.clone(),
                    source,
                })?;
                toml::from_str(&text).map_err(|source| ConfigError::Parse { path: p.clone(), source })
            }
        }
    }
}

pub fn require_dir(what: &'static str, p: &Path) -> Result<(), ConfigError> {
    if p.is_dir() {
        Ok(())
    } else {
        Err(ConfigError::NoSuchPath {
            what,
            path: p.to_path_buf(),
        })
    }
}

pub fn require_file(what: &'static str, p: &Path) -> Result<(), ConfigError> {
    if p.is_file() {
        Ok(())
    } else {
        Err(ConfigError::NoSuchPath {
            what,
            path: p.to_path_buf(),
        })
    }
}
