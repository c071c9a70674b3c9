use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use neurofind_core::survival::{analyze_covariate, cox_fit, km_svg, read_survival_csv, CovariateAnalysis, CoxOptions};
use serde::Serialize;
use tracing::info;

use crate::config::{require_file, ConfigError, PipelineConfig};
use crate::manifest::{now, ItemRecord, OutputFile, RunManifest};
use crate::CliError;

#[derive(Debug, Clone)]
pub struct SurvivalArgs {
    pub csv: PathBuf,
    /// Empty means every covariate column in the file.
    pub covariates: Vec<String>,
    /// Also fit one Cox model on all covariates together.
    pub multivariate: bool,
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    covariate: &'a str,
    threshold: f64,
    binary: bool,
    n_high: usize,
    n_low: usize,
    median_high_days: Option<f64>,
    median_low_days: Option<f64>,
    logrank_chi_square: Option<f64>,
    logrank_p: Option<f64>,
    cox_beta: Option<f64>,
    cox_hazard_ratio: Option<f64>,
    cox_ci_lower: Option<f64>,
    cox_ci_upper: Option<f64>,
    cox_p: Option<f64>,
    notes: String,
}

fn summary_row(a: &CovariateAnalysis) -> SummaryRow<'_> {
    SummaryRow {
        covariate: &a.covariate,
        threshold: a.threshold,
        binary: a.binary,
        n_high: a.n_high,
        n_low: a.n_low,
        median_high_days: a.km_high.median(),
        median_low_days: a.km_low.median(),
        logrank_chi_square: a.logrank.map(|l| l.chi_square),
        logrank_p: a.logrank.map(|l| l.p_value),
        cox_beta: a.cox.as_ref().map(|c| c.beta),
        cox_hazard_ratio: a.cox.as_ref().map(|c| c.hazard_ratio),
        cox_ci_lower: a.cox.as_ref().map(|c| c.ci_lower),
        cox_ci_upper: a.cox.as_ref().map(|c| c.ci_upper),
        cox_p: a.cox.as_ref().map(|c| c.p_value),
        notes: a.notes.join("; "),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn summary_csv(rows: &[SummaryRow<'_>]) -> String {
    let mut out = String::from(
        "covariate,threshold,binary,n_high,n_low,median_high_days,median_low_days,logrank_chi_square,logrank_p,cox_beta,cox_hazard_ratio,cox_ci_lower,cox_ci_upper,cox_p,notes\n",
    );
    for r in rows {
        let notes = r.notes.replace('"', "\"\"");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},\"{}\"\n",
            r.covariate,
            r.threshold,
            r.binary,
            r.n_high,
            r.n_low,
            fmt_opt(r.median_high_days),
            fmt_opt(r.median_low_days),
            fmt_opt(r.logrank_chi_square),
            fmt_opt(r.logrank_p),
            fmt_opt(r.cox_beta),
            fmt_opt(r.cox_hazard_ratio),
            fmt_opt(r.cox_ci_lower),
            fmt_opt(r.cox_ci_upper),
            fmt_opt(r.cox_p),
            notes
        ));
    }
    out
}

fn write(path: &Path, bytes: &[u8], outputs: &mut Vec<OutputFile>) -> std::io::Result<()> {
    std::fs::write(path, bytes)?;
    outputs.push(OutputFile::of(path)?);
    Ok(())
}

pub fn cmd_survival(cfg: &PipelineConfig, args: &SurvivalArgs, manifest_path: Option<&Path>) -> Result<RunManifest, CliError> {
    let started_at = now();
    let out_dir = cfg.paths.output_dir.clone().ok_or(ConfigError::Missing("paths.output_dir / --out"))?;
    require_file("survival table", &args.csv)?;
    let records = read_survival_csv(std::fs::File::open(&args.csv)?)
        .map_err(|e| ConfigError::Invalid(format!("{}: {e}", args.csv.display())))?;
    let available: BTreeSet<String> = records.iter().flat_map(|r| r.covariates.keys().cloned()).collect();
    let covariates: Vec<String> = if args.covariates.is_empty() {
        available.iter().cloned().collect()
    } else {
        for c in &args.covariates {
            if !available.contains(c) {
                return Err(ConfigError::Invalid(format!("covariate {c:?} is not a column of {}", args.csv.display())).into());
            }
        }
        args.covariates.clone()
    };
    if covariates.is_empty() {
        return Err(ConfigError::Invalid("no covariate columns to analyse".into()).into());
    }
    std::fs::create_dir_all(&out_dir)?;
    let opts = CoxOptions::default();
    let t_max = records.iter().map(|r| r.time_days).fold(0.0, f64::max);

    let mut items = Vec::new();
    let mut analyses = Vec::new();
    for cov in &covariates {
        match analyze_covariate(&records, cov, &opts) {
            Ok(a) => {
                let mut rec = ItemRecord::ok(cov);
                rec.warnings = a.notes.clone();
                let svg = km_svg(cov, &[("High", &a.km_high), ("Low", &a.km_low)], t_max);
                let name: String = cov
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
                    .collect();
                write(&out_dir.join(format!("km_{name}.svg")), svg.as_bytes(), &mut rec.outputs)?;
                items.push(rec);
                analyses.push(a);
            }
            Err(e) => items.push(ItemRecord::failed(cov, vec![e.to_string()])),
        }
    }
    info!(n = analyses.len(), "covariates analysed");

    let mut outputs = Vec::new();
    write(
        &out_dir.join("survival.json"),
        &serde_json::to_vec_pretty(&analyses).expect("analyses serialize"),
        &mut outputs,
    )?;
    let rows: Vec<SummaryRow<'_>> = analyses.iter().map(summary_row).collect();
    write(&out_dir.join("survival_summary.csv"), summary_csv(&rows).as_bytes(), &mut outputs)?;

    if args.multivariate {
        let names: Vec<&str> = covariates.iter().map(String::as_str).collect();
        match cox_fit(&records, &names, &opts) {
            Ok(fit) => {
                let mut rec = ItemRecord::ok("multivariate_cox");
                if !fit.converged {
                    rec.warnings.push(format!("not converged after {} iterations", fit.iterations));
                }
                write(
                    &out_dir.join("cox_multivariate.json"),
                    &serde_json::to_vec_pretty(&fit).expect("fit serializes"),
                    &mut rec.outputs,
                )?;
                items.push(rec);
            }
            Err(e) => items.push(ItemRecord::failed("multivariate_cox", vec![e.to_string()])),
        }
    }

    let manifest = RunManifest {
        command: "survival".into(),
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
