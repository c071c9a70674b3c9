use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::vasari::{FeatureSet, Measured};

/// Modalities that structural T1/T2/FLAIR imaging cannot support.
pub const FORBIDDEN_TERMS: [&str; 8] = [
    "diffusion",
    "perfusion",
    "spectroscopy",
    "MRA",
    "susceptibility",
    "SWI",
    "DWI",
    "ADC",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    ForbiddenModality,
    UnsupportedNumber,
    MinimalShiftPhrasing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub severity: Severity,
    /// The offending text.
    pub span: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    pub mm: f64,
    pub cm: f64,
    /// Relative tolerance for volumes.
    pub ml_rel: f64,
    /// Shifts below this should be phrased as "no shift".
    pub minimal_shift_mm: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            mm: 1.0,
            cm: 0.2,
            ml_rel: 0.10,
            minimal_shift_mm: 5.0,
        }
    }
}

static QUANTITY: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?ix)
        (?P<cmp>(?:[<>≤≥]=?|\b(?:greater|more|less|fewer)\s+than|\bup\s+to|\bover|\bunder|\bat\s+least|\bat\s+most)\s*)?
        (?P<dims>\d+(?:\.\d+)?(?:\s*(?:x|×|by)\s*\d+(?:\.\d+)?)*)
        \s*(?P<unit>mm|cm|ml|cc)\b",
    )
    .unwrap()
});

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+(?:\.\d+)?").unwrap());

static SENTENCE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[^.!?\n]+(?:\.\d+[^.!?\n]*)*[.!?]?").unwrap());

static NEGATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(no|not|without|negligible|insignificant)\b").unwrap());

fn forbidden_regex(term: &str) -> Regex {
    Regex::new(&format!(r"(?i)\b{}\b", regex::escape(term))).unwrap()
}

/// Rule checks of generated findings against the feature document:
/// forbidden modality terms, quantities with no matching feature value, and
/// minimal shifts not phrased as "no shift" (warning only).
pub fn validate_report(text: &str, features: &FeatureSet, tol: &Tolerances) -> Vec<Violation> {
    let mut out = Vec::new();
    let metadata = features.to_json_pretty();
    for term in FORBIDDEN_TERMS {
        let re = forbidden_regex(term);
        if re.is_match(&metadata) {
            continue;
        }
        for m in re.find_iter(text) {
            out.push(Violation {
                kind: ViolationKind::ForbiddenModality,
                severity: Severity::Error,
                span: m.as_str().to_string(),
                message: format!("mentions {term}, which the available sequences cannot support"),
            });
        }
    }

    let mls = features.max_mls_mm.value().copied();
    let dims_cm: Vec<f64> = features.lesion_sizes_cm.iter().flatten().copied().collect();
    let mut mm_refs: Vec<f64> = dims_cm.iter().map(|d| d * 10.0).collect();
    mm_refs.extend(mls);
    let mut cm_refs = dims_cm.clone();
    cm_refs.extend(mls.map(|m| m / 10.0));
    let ml_refs = [features.total_tumor_volume_ml, features.ed_volume_ml];

    for cap in QUANTITY.captures_iter(text) {
        if cap.name("cmp").is_some() {
            continue;
        }
        let unit = cap["unit"].to_ascii_lowercase();
        let span = cap.get(0).unwrap().as_str().to_string();
        for n in NUMBER.find_iter(&cap["dims"]) {
            let v: f64 = n.as_str().parse().unwrap();
            let (ok, rule) = match unit.as_str() {
                "mm" => (
                    mm_refs.iter().any(|r| (r - v).abs() <= tol.mm),
                    format!("within {} mm", tol.mm),
                ),
                "cm" => (
                    cm_refs.iter().any(|r| (r - v).abs() <= tol.cm),
                    format!("within {} cm", tol.cm),
                ),
                _ => (
                    ml_refs.iter().any(|r| (r - v).abs() <= tol.ml_rel * r.abs()),
                    format!("within {}% relative", tol.ml_rel * 100.0),
                ),
            };
            if !ok {
                out.push(Violation {
                    kind: ViolationKind::UnsupportedNumber,
                    severity: Severity::Error,
                    span: span.clone(),
                    message: format!("{v} {unit} matches no feature value ({rule})"),
                });
            }
        }
    }

    if let Measured::Value(m) = features.max_mls_mm {
        if m > 0.0 && m < tol.minimal_shift_mm {
            let phrased = SENTENCE
                .find_iter(text)
                .map(|s| s.as_str())
                .filter(|s| s.to_ascii_lowercase().contains("midline"))
                .any(|s| NEGATION.is_match(s));
            if !phrased {
                out.push(Violation {
                    kind: ViolationKind::MinimalShiftPhrasing,
                    severity: Severity::Warning,
                    span: String::new(),
                    message: format!(
                        "shift of {m} mm is below {} mm but is not described as no shift",
                        tol.minimal_shift_mm
                    ),
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::Hemisphere;
    use crate::reportgen::{fixtures, render_findings};

    fn kinds(v: &[Violation]) -> Vec<ViolationKind> {
        v.iter().map(|x| x.kind).collect()
    }

    #[test]
    fn restricted_diffusion_is_flagged() {
        let v = validate_report(
            "Restricted diffusion is noted within the enhancing portion of the lesion.",
            &fixtures::features(),
            &Tolerances::default(),
        );
        assert_eq!(kinds(&v), vec![ViolationKind::ForbiddenModality]);
        assert_eq!(v[0].span, "diffusion");
    }

    #[test]
    fn whole_words_only() {
        let v = validate_report("The madcap cadence of swirling", &fixtures::features(), &Tolerances::default());
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn unsupported_shift_value() {
        let v = validate_report("There is a 25 mm midline shift.", &fixtures::features(), &Tolerances::default());
        assert_eq!(kinds(&v), vec![ViolationKind::UnsupportedNumber]);
        let ok = validate_report("There is a 12.8 mm midline shift.", &fixtures::features(), &Tolerances::default());
        assert!(ok.is_empty());
    }

    #[test]
    fn sizes_volumes_and_comparators() {
        let f = fixtures::features();
        let t = Tolerances::default();
        assert!(validate_report("It measures 7.0 x 5.7 x 5.3 cm.", &f, &t).is_empty());
        assert_eq!(validate_report("It measures 7.0 x 4.0 x 5.3 cm.", &f, &t).len(), 1);
        assert!(validate_report("Edema of 84 mL.", &f, &t).is_empty());
        assert_eq!(validate_report("Edema of 120 mL.", &f, &t).len(), 1);
        assert!(validate_report("a thick (>3 mm) margin", &f, &t).is_empty());
    }

    #[test]
    fn canonical_rendering_is_clean() {
        let f = fixtures::features();
        assert!(validate_report(&render_findings(&f), &f, &Tolerances::default()).is_empty());
    }

    #[test]
    fn minimal_shift_warning() {
        let mut f = fixtures::features();
        f.max_mls_mm = Measured::Value(3.0);
        f.mls_direction = Measured::Value(Hemisphere::Left);
        let t = Tolerances::default();
        let v = validate_report("There is a 3 mm leftward midline shift.", &f, &t);
        assert_eq!(kinds(&v), vec![ViolationKind::MinimalShiftPhrasing]);
        assert_eq!(v[0].severity, Severity::Warning);
        assert!(validate_report("No significant midline shift (3 mm leftward).", &f, &t).is_empty());
    }

    #[test]
    fn terms_present_in_metadata_are_allowed() {
        let mut f = fixtures::features();
        f.sex = Measured::Value("perfusion study cohort".into());
        assert!(validate_report("Perfusion is normal.", &f, &Tolerances::default()).is_empty());
    }
}
