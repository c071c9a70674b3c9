//! Scores candidate findings against reference findings.
//!
//! Reports are plain-text files named `<case_id>.txt`; each framework's
//! candidates live in their own directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neurofind_core::reportgen::{
    feature_agreement, parse_report_findings, summarize_agreement, ExtractedReportFeatures, FeatureScore,
};
use neurofind_core::texteval::{
    aggregate_scores, approx_randomization_test, evaluate_pair, format_table, summaries_to_csv, tbfact_score,
    CorpusSummary, EvalScores, TbFactAudit,
};
use neurofind_core::vasari::FeatureSet;
use serde::Serialize;
use tracing::info;

use crate::config::{require_dir, BackendKind, ConfigError, PipelineConfig};
use crate::extract::FEATURES_SUFFIX;
use crate::generate::backend;
use crate::manifest::{now, ItemRecord, OutputFile, RunManifest};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub references: PathBuf,
    /// (framework name, directory), first is the baseline for significance tests.
    pub candidates: Vec<(String, PathBuf)>,
    pub features: Option<PathBuf>,
    pub tbfact: bool,
    pub ar_iters: usize,
}

#[derive(Debug, Serialize)]
struct CaseScore<'a> {
    case_id: &'a str,
    #[serde(flatten)]
    scores: &'a EvalScores,
}

#[derive(Debug, Serialize)]
struct SignificanceRow {
    baseline: String,
    framework: String,
    metric: String,
    n: usize,
    mean_difference: f64,
    p_value: f64,
    iters: usize,
    seed: u64,
}

fn text_files(dir: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), std::fs::read_to_string(&p)?);
            }
        }
    }
    Ok(out)
}

fn load_features(dir: &Path) -> Result<BTreeMap<String, FeatureSet>, CliError> {
    let mut out = BTreeMap::new();
    for p in crate::generate::feature_files(dir)? {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        let id = name.strip_suffix(FEATURES_SUFFIX).unwrap_or(name).to_string();
        let f: FeatureSet = serde_json::from_slice(&std::fs::read(&p)?)
            .map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?;
        out.insert(id, f);
    }
    Ok(out)
}

fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

fn write(path: &Path, bytes: &[u8], outputs: &mut Vec<OutputFile>) -> std::io::Result<()> {
    std::fs::write(path, bytes)?;
    outputs.push(OutputFile::of(path)?);
    Ok(())
}

pub fn cmd_evaluate(cfg: &PipelineConfig, args: &EvaluateArgs, manifest_path: Option<&Path>) -> Result<RunManifest, CliError> {
    let started_at = now();
    let out_dir = cfg.paths.output_dir.clone().ok_or(ConfigError::Missing("paths.output_dir / --out"))?;
    require_dir("references directory", &args.references)?;
    if args.candidates.is_empty() {
        return Err(ConfigError::Missing("at least one --candidate NAME=DIR").into());
    }
    for (name, dir) in &args.candidates {
        if name.is_empty() {
            return Err(ConfigError::Invalid("framework names must be non-empty".into()).into());
        }
        require_dir("candidate directory", dir)?;
    }
    if args.tbfact && cfg.generation.backend == BackendKind::Template {
        return Err(ConfigError::Invalid("factuality scoring needs generation.backend = \"openai\"".into()).into());
    }
    if let Some(f) = &args.features {
        require_dir("features directory", f)?;
    }
    let references = text_files(&args.references)?;
    if references.is_empty() {
        return Err(ConfigError::Invalid(format!("no .txt reports in {}", args.references.display())).into());
    }
    let features = match &args.features {
        Some(d) => Some(load_features(d)?),
        None => None,
    };
    let judge = if args.tbfact { Some(backend(cfg)?) } else { None };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    std::fs::create_dir_all(&out_dir)?;

    let mut items = Vec::new();
    let mut outputs = Vec::new();
    let mut summaries: Vec<(String, CorpusSummary)> = Vec::new();
    let mut per_case: Vec<BTreeMap<String, EvalScores>> = Vec::new();

    for (name, dir) in &args.candidates {
        let mut rec = ItemRecord::ok(name);
        let candidates = text_files(dir)?;
        let mut scores: BTreeMap<String, EvalScores> = BTreeMap::new();
        let mut audits: BTreeMap<String, TbFactAudit> = BTreeMap::new();
        for (case, reference) in &references {
            let Some(cand) = candidates.get(case) else {
                rec.warnings.push(format!("{case}: no candidate report"));
                continue;
            };
            let mut s = evaluate_pair(cand, reference);
            if let Some(judge) = &judge {
                match rt.block_on(tbfact_score(cand, reference, judge.as_ref(), cfg.llm.max_in_flight)) {
                    Ok((t, audit)) => {
                        s.tbfact = Some(t);
                        audits.insert(case.clone(), audit);
                    }
                    Err(e) => rec.errors.push(format!("{case}: factuality scoring failed: {e}")),
                }
            }
            scores.insert(case.clone(), s);
        }
        for case in candidates.keys().filter(|c| !references.contains_key(*c)) {
            rec.warnings.push(format!("{case}: no reference report"));
        }
        let stem = safe_name(name);
        let rows: Vec<CaseScore<'_>> = scores
            .iter()
            .map(|(case_id, scores)| CaseScore { case_id, scores })
            .collect();
        write(
            &out_dir.join(format!("{stem}.scores.json")),
            &serde_json::to_vec_pretty(&rows).expect("scores serialize"),
            &mut rec.outputs,
        )?;
        if !audits.is_empty() {
            write(
                &out_dir.join(format!("{stem}.tbfact_audit.json")),
                &serde_json::to_vec_pretty(&audits).expect("audits serialize"),
                &mut rec.outputs,
            )?;
        }

        if let Some(features) = &features {
            let mut records = Vec::new();
            for (case, f) in features {
                if let Some(text) = candidates.get(case) {
                    match feature_agreement(&parse_report_findings(text), &ExtractedReportFeatures::from_features(f)) {
                        Ok(r) => records.push(r),
                        Err(e) => rec.warnings.push(format!("{case}: agreement: {e}")),
                    }
                }
            }
            let summary: BTreeMap<String, FeatureScore> = summarize_agreement(&records);
            write(
                &out_dir.join(format!("{stem}.agreement.json")),
                &serde_json::to_vec_pretty(&summary).expect("agreement serializes"),
                &mut rec.outputs,
            )?;
        }

        let all: Vec<EvalScores> = scores.values().cloned().collect();
        match aggregate_scores(&all) {
            Ok(s) => summaries.push((name.clone(), s)),
            Err(e) => rec.errors.push(format!("no scored pairs: {e}")),
        }
        if !rec.errors.is_empty() {
            rec.status = crate::manifest::ItemStatus::Failed;
        }
        info!(framework = %name, n = scores.len(), "scored");
        per_case.push(scores);
        items.push(rec);
    }

    if !summaries.is_empty() {
        write(&out_dir.join("summary.md"), format_table(&summaries).as_bytes(), &mut outputs)?;
        let csv = summaries_to_csv(&summaries).map_err(|e| CliError::Other(e.to_string()))?;
        write(&out_dir.join("summary.csv"), csv.as_bytes(), &mut outputs)?;
    }

    if args.candidates.len() >= 2 {
        let mut rows = Vec::new();
        let base_name = &args.candidates[0].0;
        for (k, (name, _)) in args.candidates.iter().enumerate().skip(1) {
            let common: Vec<&String> = per_case[0].keys().filter(|c| per_case[k].contains_key(*c)).collect();
            if common.is_empty() {
                continue;
            }
            let metrics: Vec<&str> = per_case[0][common[0]].metrics().iter().map(|(m, _)| *m).collect();
            for metric in metrics {
                let pick = |m: &BTreeMap<String, EvalScores>| -> Option<Vec<f64>> {
                    common
                        .iter()
                        .map(|c| m[*c].metrics().into_iter().find(|(n, _)| *n == metric).map(|(_, v)| v))
                        .collect()
                };
                let (Some(a), Some(b)) = (pick(&per_case[0]), pick(&per_case[k])) else {
                    continue;
                };
                let p = approx_randomization_test(&a, &b, args.ar_iters, cfg.seed)
                    .map_err(|e| CliError::Other(e.to_string()))?;
                let diff = a.iter().zip(&b).map(|(x, y)| y - x).sum::<f64>() / a.len() as f64;
                rows.push(SignificanceRow {
                    baseline: base_name.clone(),
                    framework: name.clone(),
                    metric: metric.to_string(),
                    n: a.len(),
                    mean_difference: diff,
                    p_value: p,
                    iters: args.ar_iters,
                    seed: cfg.seed,
                });
            }
        }
        write(
            &out_dir.join("significance.json"),
            &serde_json::to_vec_pretty(&rows).expect("rows serialize"),
            &mut outputs,
        )?;
    }

    let manifest = RunManifest {
        command: "evaluate".into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: cfg.digest(),
        seed: cfg.seed,
        jobs: cfg.jobs,
        started_at,
        finished_at: now(),
        items,
        outputs,
    };
    let path = manifest_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_dir.join("run_manifest.json"));
    manifest.write(&path)?;
    Ok(manifest)
}
