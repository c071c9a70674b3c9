//! Prompt construction, findings generation through a chat backend, report
//! validation and rule-based findings parsing.

mod parse;
mod render;
mod validate;

use std::path::Path;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use parse::{
    feature_agreement, parse_report_findings, summarize_agreement, AgreementRecord, ExtractedReportFeatures,
    FeatureScore,
};
pub use render::render_findings;
pub use validate::{validate_report, Severity, Tolerances, Violation, ViolationKind, FORBIDDEN_TERMS};

use crate::llm::{ChatBackend, ChatMessage, LlmError};
use crate::vasari::FeatureSet;

pub const PLACEHOLDERS: [&str; 3] = ["{example_findings}", "{subject_id}", "{metadata_json}"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("template placeholder {placeholder} appears {count} times (expected exactly once)")]
    Placeholder { placeholder: &'static str, count: usize },
    #[error("no example findings found in {0}")]
    NoExamples(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("the two feature sets share no populated field")]
    NoOverlap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateVariant {
    Full,
    Short,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    pub variant: TemplateVariant,
    pub example_findings: String,
    pub body: String,
}

const FULL_BODY: &str = include_str!("../../templates/full.txt");
const SHORT_BODY: &str = include_str!("../../templates/short.txt");
const BUNDLED_EXAMPLES: [&str; 2] = [
    include_str!("../../templates/examples/01_left_frontal.txt"),
    include_str!("../../templates/examples/02_right_parietal.txt"),
];

fn join_examples<'a>(examples: impl IntoIterator<Item = &'a str>) -> String {
    examples
        .into_iter()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

impl PromptTemplate {
    pub fn bundled(variant: TemplateVariant) -> Self {
        let body = match variant {
            TemplateVariant::Short => SHORT_BODY,
            _ => FULL_BODY,
        };
        PromptTemplate {
            variant,
            example_findings: join_examples(BUNDLED_EXAMPLES),
            body: body.to_string(),
        }
    }

    pub fn with_body(mut self, body: String) -> Result<Self, ReportError> {
        check_placeholders(&body)?;
        self.body = body;
        self.variant = TemplateVariant::Custom;
        Ok(self)
    }

    /// Replaces the in-context examples with every `.txt` file of `dir`,
    /// in file-name order.
    pub fn with_examples_dir(mut self, dir: &Path) -> Result<Self, ReportError> {
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        let texts = files
            .iter()
            .map(std::fs::read_to_string)
            .collect::<Result<Vec<_>, _>>()?;
        let joined = join_examples(texts.iter().map(String::as_str));
        if joined.is_empty() {
            return Err(ReportError::NoExamples(dir.display().to_string()));
        }
        self.example_findings = joined;
        Ok(self)
    }
}

fn check_placeholders(body: &str) -> Result<(), ReportError> {
    for p in PLACEHOLDERS {
        let count = body.matches(p).count();
        if count != 1 {
            return Err(ReportError::Placeholder { placeholder: p, count });
        }
    }
    Ok(())
}

/// Substitutes the three placeholders in a single left-to-right pass, so
/// placeholder-like text inside the substituted values is left alone.
pub fn build_prompt(features: &FeatureSet, template: &PromptTemplate) -> Result<String, ReportError> {
    check_placeholders(&template.body)?;
    let metadata = features.to_json_pretty();
    let values = [
        template.example_findings.as_str(),
        features.subject_id.as_str(),
        metadata.as_str(),
    ];
    let mut out = String::with_capacity(template.body.len() + metadata.len() + template.example_findings.len());
    let mut rest = template.body.as_str();
    loop {
        let next = PLACEHOLDERS
            .iter()
            .enumerate()
            .filter_map(|(i, p)| rest.find(p).map(|pos| (pos, i)))
            .min();
        match next {
            Some((pos, i)) => {
                out.push_str(&rest[..pos]);
                out.push_str(values[i]);
                rest = &rest[pos + PLACEHOLDERS[i].len()..];
            }
            None => {
                out.push_str(rest);
                break;
            }
        }
    }
    Ok(out)
}

pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedReport {
    pub subject_id: String,
    pub findings_text: String,
    pub model_name: String,
    pub prompt_hash: String,
    pub created_at: String,
    pub violations: Vec<Violation>,
}

pub async fn generate_report(
    subject_id: &str,
    prompt: &str,
    backend: &dyn ChatBackend,
) -> Result<GeneratedReport, ReportError> {
    let text = backend.complete(&[ChatMessage::user(prompt)]).await?;
    Ok(GeneratedReport {
        subject_id: subject_id.to_string(),
        findings_text: text.trim().to_string(),
        model_name: backend.model_name().to_string(),
        prompt_hash: prompt_hash(prompt),
        created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        violations: Vec::new(),
    })
}

/// Offline stand-in for a language model: reads the metadata JSON back out
/// of the prompt and renders canonical findings sentences from it.
#[derive(Debug, Clone, Default)]
pub struct TemplateBackend;

const METADATA_MARKER: &str = "METADATA (for subject ";

/// Feature document embedded in a prompt built by [`build_prompt`].
pub fn metadata_from_prompt(prompt: &str) -> Option<FeatureSet> {
    let at = prompt.rfind(METADATA_MARKER)?;
    let start = at + prompt[at..].find('{')?;
    let mut stream = serde_json::Deserializer::from_str(&prompt[start..]).into_iter::<FeatureSet>();
    stream.next()?.ok()
}

#[async_trait]
impl ChatBackend for TemplateBackend {
    fn model_name(&self) -> &str {
        "template-stub"
    }

    async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
        let prompt = messages.last().map(|m| m.content.as_str()).unwrap_or("");
        let features = metadata_from_prompt(prompt)
            .ok_or_else(|| LlmError::Backend("prompt carries no parseable metadata".into()))?;
        Ok(render_findings(&features))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use crate::anatomy::Hemisphere;
    use crate::vasari::*;

    pub fn features() -> FeatureSet {
        FeatureSet {
            subject_id: "case-001".into(),
            age: Measured::Value(58.0),
            sex: Measured::Value("M".into()),
            total_tumor_volume_ml: 168.1,
            lesion_sizes_cm: vec![[7.1, 5.6, 5.3]],
            prop_necrosis: 0.2199,
            num_lesions: 1,
            prop_enhancing: 0.2827,
            prop_edema: 0.4974,
            cortical_involvement: Measured::Value(true),
            tumor_location: Measured::Value(vec!["right temporal lobe".into(), "right parietal lobe".into()]),
            ventricular_invasion: Measured::Value(true),
            side_of_epicenter: Measured::Value(Side::Right),
            enhancement_quality: EnhancementQuality::Marked,
            enhancement_thickness: EnhancementThickness::Thick,
            multiple_satellites: true,
            multifocal_or_multicentric: Measured::Value(Focality::Solitary),
            deep_wm_invasion: Measured::Value(true),
            eloquent_brain: Measured::Value(EloquentInvolvement {
                involved: true,
                functions: vec!["vision".into()],
                regions: vec!["right cuneus".into()],
            }),
            level_of_max_mls: Measured::Value("level of the lateral ventricles".into()),
            max_mls_mm: Measured::Value(12.0),
            mls_direction: Measured::Value(Hemisphere::Left),
            edema_crosses_midline: Measured::Value(true),
            et_crosses_midline: Measured::Value(false),
            asymmetrical_ventricles: Measured::Value(true),
            enlarged_ventricles: Measured::Value(false),
            ed_volume_ml: 83.6,
            provenance: Provenance {
                tool: "neurofind-core".into(),
                version: "0.1.0".into(),
                anatomy_scheme: "synthseg-dk".into(),
                config_sha256: FeatureConfig::default().digest(),
                thresholds: FeatureConfig::default(),
            },
        }
    }
}
