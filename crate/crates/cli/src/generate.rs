use std::path::{Path, PathBuf};
use std::sync::Arc;

use neurofind_core::llm::{bounded_map, ChatBackend, OpenAiCompatClient};
use neurofind_core::reportgen::{
    build_prompt, generate_report, validate_report, PromptTemplate, Severity, TemplateBackend, TemplateVariant,
};
use neurofind_core::vasari::FeatureSet;
use tracing::{info, warn};

use crate::config::{require_dir, BackendKind, ConfigError, PipelineConfig};
use crate::extract::FEATURES_SUFFIX;
use crate::manifest::{now, ItemRecord, OutputFile, RunManifest};
use crate::CliError;

pub fn backend(cfg: &PipelineConfig) -> Result<Arc<dyn ChatBackend>, ConfigError> {
    Ok(match cfg.generation.backend {
        BackendKind::Template => Arc::new(TemplateBackend),
        BackendKind::Openai => Arc::new(
            OpenAiCompatClient::new(cfg.llm.clone()).map_err(|e| ConfigError::Invalid(format!("llm: {e}")))?,
        ),
    })
}

pub fn template(cfg: &PipelineConfig) -> Result<PromptTemplate, ConfigError> {
    let g = &cfg.generation;
    let variant = match g.template {
        TemplateVariant::Custom => TemplateVariant::Full,
        v => v,
    };
    let mut t = PromptTemplate::bundled(variant);
    if let Some(p) = &g.template_file {
        let body = std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
            path: p.clone(),
            source,
        })?;
        t = t
            .with_body(body)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", p.display())))?;
    } else if g.template == TemplateVariant::Custom {
        return Err(ConfigError::Missing("generation.template_file for a custom template"));
    }
    if let Some(d) = &g.examples_dir {
        t = t
            .with_examples_dir(d)
            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", d.display())))?;
    }
    Ok(t)
}

/// `*.features.json` files of `dir`, sorted.
pub fn feature_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(FEATURES_SUFFIX)))
        .collect();
    out.sort();
    Ok(out)
}

async fn generate_one(
    path: PathBuf,
    out_dir: PathBuf,
    template: Arc<PromptTemplate>,
    backend: Arc<dyn ChatBackend>,
    cfg: Arc<PipelineConfig>,
) -> ItemRecord {
    let id = path
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(FEATURES_SUFFIX))
        .unwrap_or("?")
        .to_string();
    let features: FeatureSet = match std::fs::read(&path)
        .map_err(|e| e.to_string())
        .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
    {
        Ok(f) => f,
        Err(e) => return ItemRecord::failed(id, vec![format!("{}: {e}", path.display())]),
    };
    let prompt = match build_prompt(&features, &template) {
        Ok(p) => p,
        Err(e) => return ItemRecord::failed(id, vec![e.to_string()]),
    };
    let mut report = match generate_report(&features.subject_id, &prompt, backend.as_ref()).await {
        Ok(r) => r,
        Err(e) => return ItemRecord::failed(id, vec![e.to_string()]),
    };
    report.violations = validate_report(&report.findings_text, &features, &cfg.generation.tolerances);

    let mut rec = ItemRecord::ok(&id);
    for v in &report.violations {
        let sev = if v.severity == Severity::Error { "error" } else { "warning" };
        rec.warnings.push(format!("validator {sev}: {:?} {:?}: {}", v.kind, v.span, v.message));
    }
    let txt = out_dir.join(format!("{id}.txt"));
    let json = out_dir.join(format!("{id}.report.json"));
    let written = std::fs::write(&txt, format!("{}\n", report.findings_text))
        .and_then(|_| std::fs::write(&json, serde_json::to_vec_pretty(&report).expect("report serializes")))
        .and_then(|_| Ok(vec![OutputFile::of(&txt)?, OutputFile::of(&json)?]));
    match written {
        Ok(outs) => rec.outputs = outs,
        Err(e) => return ItemRecord::failed(id, vec![e.to_string()]),
    }
    rec
}

pub fn cmd_generate(
    cfg: &PipelineConfig,
    features_dir: &Path,
    manifest_path: Option<&Path>,
) -> Result<RunManifest, CliError> {
    let started_at = now();
    let out_dir = cfg.paths.output_dir.clone().ok_or(ConfigError::Missing("paths.output_dir / --out"))?;
    require_dir("features directory", features_dir)?;
    let files = feature_files(features_dir)?;
    if files.is_empty() {
        return Err(ConfigError::Invalid(format!("no *{FEATURES_SUFFIX} files in {}", features_dir.display())).into());
    }
    let template = Arc::new(template(cfg)?);
    let backend = backend(cfg)?;
    std::fs::create_dir_all(&out_dir)?;
    info!(n = files.len(), model = backend.model_name(), "generating findings");

    let shared_cfg = Arc::new(cfg.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let items = rt.block_on(bounded_map(files, cfg.jobs, |p| {
        generate_one(p, out_dir.clone(), template.clone(), backend.clone(), shared_cfg.clone())
    }));
    for i in &items {
        for e in &i.errors {
            warn!(case = %i.id, "{e}");
        }
    }
    let manifest = RunManifest {
        command: "generate".into(),
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
