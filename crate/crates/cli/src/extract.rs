//! Per-case feature extraction.
//!
//! ```text
//! <cases_dir>/<case_id>/
//!     t1n.nii[.gz] or t1c.nii[.gz]   subject grid (required)
//!     tumor.nii[.gz]                 BraTS label map (required)
//!     anatomy.nii[.gz]               SynthSeg-style parcellation (optional)
//!     midline.nii[.gz]               subject-space midline mask (optional)
//!     field.nii[.gz]                 atlas-to-subject displacement, used with
//!                                    `paths.atlas_midline` when no midline mask
//!     clinical.json                  {"age": .., "sex": ..} (optional)
//! ```

use std::path::{Path, PathBuf};

use neurofind_core::anatomy::AnatomyScheme;
use neurofind_core::midline::{subject_midline, MidlineSource};
use neurofind_core::vasari::{extract_features, CaseInputs, FeatureConfig};
use neurofind_core::volume::{load_displacement_field, load_nifti, Grid, Mask};
use rayon::prelude::*;
use serde::Deserialize;
use tracing::{info, warn};

use crate::config::{require_dir, require_file, ConfigError, PipelineConfig};
use crate::manifest::{now, ItemRecord, OutputFile, RunManifest};
use crate::CliError;

pub const FEATURES_SUFFIX: &str = ".features.json";

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct Clinical {
    age: Option<f64>,
    sex: Option<String>,
}

pub fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.nii.gz"), format!("{stem}.nii")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Sorted sub-directories of `dir`.
pub fn case_dirs(dir: &Path) -> std::io::Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            if let Some(name) = entry.file_name().to_str() {
                if !name.starts_with('.') {
                    out.push((name.to_string(), entry.path()));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

struct Shared<'a> {
    config: &'a FeatureConfig,
    scheme: &'a AnatomyScheme,
    atlas_midline: Option<&'a Mask>,
}

fn check_grid(reference: &Grid, other: &Grid, what: &str) -> Result<(), String> {
    if reference.matches(other, 1e-4) {
        Ok(())
    } else {
        Err(format!("{what} grid differs from the T1 grid"))
    }
}

/// Loads and extracts one case. Missing inputs are all reported together.
fn extract_case(id: &str, dir: &Path, out_dir: &Path, shared: &Shared<'_>) -> ItemRecord {
    let t1 = find_volume(dir, "t1n").or_else(|| find_volume(dir, "t1c"));
    let tumor = find_volume(dir, "tumor");
    let mut missing = Vec::new();
    if t1.is_none() {
        missing.push("missing T1 volume (t1n.nii[.gz] or t1c.nii[.gz])".to_string());
    }
    if tumor.is_none() {
        missing.push("missing tumor mask (tumor.nii[.gz])".to_string());
    }
    if !missing.is_empty() {
        return ItemRecord::failed(id, missing);
    }
    let mut record = ItemRecord::ok(id);
    match run_case(id, dir, &t1.unwrap(), &tumor.unwrap(), out_dir, shared, &mut record.warnings) {
        Ok(out) => record.outputs.push(out),
        Err(e) => {
            record = ItemRecord {
                warnings: record.warnings,
                ..ItemRecord::failed(id, vec![e])
            }
        }
    }
    record
}

fn run_case(
    id: &str,
    dir: &Path,
    t1: &Path,
    tumor: &Path,
    out_dir: &Path,
    shared: &Shared<'_>,
    warnings: &mut Vec<String>,
) -> Result<OutputFile, String> {
    fn err(what: &'static str) -> impl Fn(neurofind_core::volume::VolumeError) -> String {
        move |e| format!("{what}: {e}")
    }
    let grid = load_nifti(t1).map_err(err("T1"))?.grid;
    let tumor = load_nifti(tumor).map_err(err("tumor"))?.to_labels().map_err(err("tumor"))?;
    check_grid(&grid, tumor.grid(), "tumor")?;

    let anatomy = match find_volume(dir, "anatomy") {
        Some(p) => {
            let a = load_nifti(p).map_err(err("anatomy"))?.to_labels().map_err(err("anatomy"))?;
            check_grid(&grid, a.grid(), "anatomy")?;
            Some(a)
        }
        None => {
            warnings.push("no anatomy parcellation; anatomical features unavailable".into());
            None
        }
    };

    let midline = if let Some(p) = find_volume(dir, "midline") {
        let m = load_nifti(p).map_err(err("midline"))?.to_mask();
        Some(subject_midline(&MidlineSource::Subject(m), &grid).map_err(|e| format!("midline: {e}"))?)
    } else if let (Some(atlas), Some(fp)) = (shared.atlas_midline, find_volume(dir, "field")) {
        let field = load_displacement_field(fp).map_err(err("field"))?;
        let source = MidlineSource::Atlas {
            mask: atlas.clone(),
            field,
        };
        Some(subject_midline(&source, &grid).map_err(|e| format!("warping atlas midline: {e}"))?)
    } else {
        warnings.push("no midline mask or displacement field; midline features unavailable".into());
        None
    };

    let clinical: Clinical = match std::fs::read(dir.join("clinical.json")) {
        Ok(b) => serde_json::from_slice(&b).map_err(|e| format!("clinical.json: {e}"))?,
        Err(_) => Clinical::default(),
    };

    let inputs = CaseInputs {
        subject_id: id.to_string(),
        tumor,
        anatomy,
        midline,
        age: clinical.age,
        sex: clinical.sex,
    };
    let ex = extract_features(&inputs, shared.config, shared.scheme).map_err(|e| e.to_string())?;
    let path = out_dir.join(format!("{id}{FEATURES_SUFFIX}"));
    let mut json = ex.features.to_json_pretty();
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| format!("writing {}: {e}", path.display()))?;
    OutputFile::of(&path).map_err(|e| e.to_string())
}

pub fn cmd_extract(cfg: &PipelineConfig, manifest_path: Option<&Path>) -> Result<RunManifest, CliError> {
    let started_at = now();
    let cases_dir = cfg.paths.cases_dir.as_deref().ok_or(ConfigError::Missing("paths.cases_dir / --cases"))?;
    let out_dir = cfg.paths.output_dir.as_deref().ok_or(ConfigError::Missing("paths.output_dir / --out"))?;
    require_dir("cases directory", cases_dir)?;
    let scheme = cfg.anatomy_scheme()?;
    let atlas = match &cfg.paths.atlas_midline {
        Some(p) => {
            require_file("atlas midline", p)?;
            Some(load_nifti(p).map_err(|e| ConfigError::Invalid(format!("atlas midline: {e}")))?.to_mask())
        }
        None => None,
    };
    let cases = case_dirs(cases_dir)?;
    if cases.is_empty() {
        return Err(ConfigError::Invalid(format!("no case directories under {}", cases_dir.display())).into());
    }
    std::fs::create_dir_all(out_dir)?;

    let shared = Shared {
        config: &cfg.features,
        scheme: &scheme,
        atlas_midline: atlas.as_ref(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Other(e.to_string()))?;
    info!(n = cases.len(), jobs = cfg.jobs, "extracting");
    let items: Vec<ItemRecord> = pool.install(|| {
        cases
            .par_iter()
            .map(|(id, dir)| {
                let r = extract_case(id, dir, out_dir, &shared);
                for e in &r.errors {
                    warn!(case = %id, "{e}");
                }
                r
            })
            .collect()
    });

    let manifest = RunManifest {
        command: "extract".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.digest(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        started_at,
        finished_at: now(),
        items,
        outputs: vec![],
    };
    let path = manifest_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("run_manifest.json"));
    manifest.write(&path)?;
    Ok(manifest)
}
