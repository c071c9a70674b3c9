//! Claim-level factuality judged by an LLM.
//!
//! Both reports are decomposed into atomic claims. Each candidate claim is
//! labelled against the reference claims (precision) and each reference
//! claim against the candidate claims (recall). `score` is the fraction of
//! all claims on either side that found support:
//! (supported + covered) / (candidate claims + reference claims).
//! That definition is a reconstruction; `f1` is the usual harmonic mean.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{bounded_map, ChatBackend, ChatMessage, LlmError};

#[derive(Debug, Error)]
pub enum TbFactError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("unparseable {stage} output: {output:?}")]
    Unparseable { stage: &'static str, output: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimLabel {
    Supported,
    Contradicted,
    Absent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TbFactScore {
    pub score: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub response: String,
}

/// Everything sent to and received from the judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbFactAudit {
    pub model: String,
    pub candidate_claims: Vec<String>,
    pub reference_claims: Vec<String>,
    pub candidate_labels: Vec<ClaimLabel>,
    pub reference_labels: Vec<ClaimLabel>,
    pub exchanges: Vec<Exchange>,
}

const DECOMPOSE: &str = "Split the radiology findings below into short, independently verifiable factual claims. \
Return only a JSON array of strings.\n\nREPORT:\n";

fn entailment_prompt(claim: &str, against: &[String]) -> String {
    let mut p = String::from("Reference claims:\n");
    for c in against {
        p.push_str("- ");
        p.push_str(c);
        p.push('\n');
    }
    p.push_str("\nClaim: ");
    p.push_str(claim);
    p.push_str("\n\nIs the claim supported by, contradicted by, or absent from the reference claims? \
Answer with exactly one word: supported, contradicted, or absent.");
    p
}

fn parse_claims(output: &str) -> Option<Vec<String>> {
    if let (Some(a), Some(b)) = (output.find('['), output.rfind(']')) {
        if a < b {
            if let Ok(v) = serde_json::from_str::<Vec<String>>(&output[a..=b]) {
                let v: Vec<String> = v.into_iter().map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                return (!v.is_empty()).then_some(v);
            }
        }
    }
    let bullets: Vec<String> = output
        .lines()
        .map(str::trim)
        .filter_map(|l| {
            l.strip_prefix("- ").or_else(|| l.strip_prefix("* ")).or_else(|| {
                let digits = l.find(|c: char| !c.is_ascii_digit())?;
                (digits > 0).then(|| l[digits..].strip_prefix(". "))?
            })
        })
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    (!bullets.is_empty()).then_some(bullets)
}

fn parse_label(output: &str) -> Option<ClaimLabel> {
    let lower = output.to_lowercase();
    [
        ("contradicted", ClaimLabel::Contradicted),
        ("supported", ClaimLabel::Supported),
        ("absent", ClaimLabel::Absent),
    ]
    .into_iter()
    .filter_map(|(w, l)| lower.find(w).map(|i| (i, l)))
    .min_by_key(|(i, _)| *i)
    .map(|(_, l)| l)
}

async fn ask(backend: &dyn ChatBackend, prompt: String) -> Result<Exchange, LlmError> {
    let response = backend.complete(&[ChatMessage::user(prompt.clone())]).await?;
    Ok(Exchange { prompt, response })
}

async fn decompose(
    backend: &dyn ChatBackend,
    report: &str,
    audit: &mut Vec<Exchange>,
) -> Result<Vec<String>, TbFactError> {
    let ex = ask(backend, format!("{DECOMPOSE}{report}")).await?;
    let claims = parse_claims(&ex.response);
    let output = ex.response.clone();
    audit.push(ex);
    claims.ok_or(TbFactError::Unparseable {
        stage: "decomposition",
        output,
    })
}

async fn label_all(
    backend: &dyn ChatBackend,
    claims: &[String],
    against: &[String],
    max_in_flight: usize,
    audit: &mut Vec<Exchange>,
) -> Result<Vec<ClaimLabel>, TbFactError> {
    let prompts: Vec<String> = claims.iter().map(|c| entailment_prompt(c, against)).collect();
    let results = bounded_map(prompts, max_in_flight, |p| ask(backend, p)).await;
    let mut labels = Vec::with_capacity(results.len());
    for r in results {
        let ex = r?;
        let label = parse_label(&ex.response);
        let output = ex.response.clone();
        audit.push(ex);
        labels.push(label.ok_or(TbFactError::Unparseable {
            stage: "entailment",
            output,
        })?);
    }
    Ok(labels)
}

fn fraction(n: usize, d: usize) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

pub async fn tbfact_score(
    candidate: &str,
    reference: &str,
    backend: &dyn ChatBackend,
    max_in_flight: usize,
) -> Result<(TbFactScore, TbFactAudit), TbFactError> {
    let mut exchanges = Vec::new();
    let cand = decompose(backend, candidate, &mut exchanges).await?;
    let refc = decompose(backend, reference, &mut exchanges).await?;
    let cand_labels = label_all(backend, &cand, &refc, max_in_flight, &mut exchanges).await?;
    let ref_labels = label_all(backend, &refc, &cand, max_in_flight, &mut exchanges).await?;

    let supported = cand_labels.iter().filter(|l| **l == ClaimLabel::Supported).count();
    let covered = ref_labels.iter().filter(|l| **l == ClaimLabel::Supported).count();
    let precision = fraction(supported, cand.len());
    let recall = fraction(covered, refc.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    let score = fraction(supported + covered, cand.len() + refc.len());
    Ok((
        TbFactScore {
            score,
            precision,
            recall,
            f1,
        },
        TbFactAudit {
            model: backend.model_name().to_string(),
            candidate_claims: cand,
            reference_claims: refc,
            candidate_labels: cand_labels,
            reference_labels: ref_labels,
            exchanges,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use async_trait::async_trait;

    /// Splits reports into sentences and answers entailment by exact lookup,
    /// or with a fixed verdict when one is set.
    struct Stub {
        verdict: Option<&'static str>,
        garbled_decomposition: bool,
    }

    fn sentences(s: &str) -> Vec<String> {
        s.split(". ")
            .map(|x| x.trim().trim_end_matches('.').to_string())
            .filter(|x| !x.is_empty())
            .collect()
    }

    #[async_trait]
    impl ChatBackend for Stub {
        fn model_name(&self) -> &str {
            "stub"
        }

        async fn complete(&self, messages: &[ChatMessage]) -> Result<String, LlmError> {
            let p = &messages[0].content;
            if let Some(report) = p.strip_prefix(DECOMPOSE) {
                if self.garbled_decomposition {
                    return Ok("I cannot help with that".into());
                }
                return Ok(serde_json::to_string(&sentences(report)).unwrap());
            }
            if let Some(v) = self.verdict {
                return Ok(v.into());
            }
            let (refs, rest) = p.split_once("\nClaim: ").unwrap();
            let claim = rest.split("\n\n").next().unwrap();
            let listed = refs.lines().any(|l| l.strip_prefix("- ") == Some(claim));
            Ok(if listed { "Supported." } else { "Absent" }.into())
        }
    }

    fn echo() -> Stub {
        Stub {
            verdict: None,
            garbled_decomposition: false,
        }
    }

    const REPORT: &str = "There is a 12 mm leftward midline shift. The mass enhances. Edema crosses the midline.";

    #[tokio::test]
    async fn identical_reports_score_one() {
        let (s, audit) = tbfact_score(REPORT, REPORT, &echo(), 2).await.unwrap();
        assert_eq!((s.precision, s.recall, s.f1, s.score), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(audit.candidate_claims.len(), 3);
        // two decompositions plus one entailment per claim in each direction
        assert_eq!(audit.exchanges.len(), 2 + 3 + 3);
    }

    #[tokio::test]
    async fn contradicting_judge() {
        let stub = Stub {
            verdict: Some("contradicted"),
            garbled_decomposition: false,
        };
        let (s, audit) = tbfact_score(REPORT, REPORT, &stub, 4).await.unwrap();
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.f1, 0.0);
        assert!(audit.candidate_labels.iter().all(|l| *l == ClaimLabel::Contradicted));
    }

    #[tokio::test]
    async fn partial_overlap() {
        let cand = "The mass enhances. There is hydrocephalus.";
        let (s, _) = tbfact_score(cand, REPORT, &echo(), 1).await.unwrap();
        assert_eq!(s.precision, 0.5);
        assert!((s.recall - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.score - 2.0 / 5.0).abs() < 1e-12);
        assert!((s.f1 - 0.4).abs() < 1e-12);
    }

    #[tokio::test]
    async fn unparseable_outputs_surface() {
        let garbled = Stub {
            verdict: None,
            garbled_decomposition: true,
        };
        let e = tbfact_score(REPORT, REPORT, &garbled, 1).await.unwrap_err();
        assert!(matches!(e, TbFactError::Unparseable { stage: "decomposition", .. }));
        let shrug = Stub {
            verdict: Some("maybe?"),
            garbled_decomposition: false,
        };
        let e = tbfact_score(REPORT, REPORT, &shrug, 1).await.unwrap_err();
        assert!(matches!(e, TbFactError::Unparseable { stage: "entailment", .. }));
    }

    #[test]
    fn claim_and_label_parsing() {
        assert_eq!(
            parse_claims("Here you go:\n[\"a\", \" b \", \"\"]").unwrap(),
            vec!["a".to_string(), "b".to_string()]
        );
        assert_eq!(parse_claims("1. one\n2. two\n- three").unwrap(), vec!["one", "two", "three"]);
        assert!(parse_claims("nothing here").is_none());
        assert_eq!(parse_label("**Supported**"), Some(ClaimLabel::Supported));
        assert_eq!(parse_label("Contradicted, not supported"), Some(ClaimLabel::Contradicted));
        assert_eq!(parse_label("unclear"), None);
    }
}
