use std::collections::BTreeMap;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::anatomy::Hemisphere;
use crate::vasari::{FeatureSet, Side};

use super::ReportError;

/// Features recoverable from free-text findings; absent when the text does
/// not state them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractedReportFeatures {
    pub mls_mm: Option<f64>,
    pub mls_direction: Option<Hemisphere>,
    pub num_lesions: Option<usize>,
    /// Dimensions of the first (dominant) measured lesion, in cm.
    pub lesion_sizes_cm: Option<Vec<f64>>,
    pub side: Option<Side>,
    pub tumor_volume_ml: Option<f64>,
    pub ventricular_effacement: Option<bool>,
    pub cortical_involvement: Option<bool>,
}

impl ExtractedReportFeatures {
    /// The same view taken directly from a feature document. Ventricular
    /// effacement is not a feature and stays absent.
    pub fn from_features(f: &FeatureSet) -> Self {
        ExtractedReportFeatures {
            mls_mm: f.max_mls_mm.value().copied(),
            mls_direction: f.mls_direction.value().copied(),
            num_lesions: Some(f.num_lesions),
            lesion_sizes_cm: f.lesion_sizes_cm.first().map(|d| d.to_vec()),
            side: f.side_of_epicenter.value().copied(),
            tumor_volume_ml: Some(f.total_tumor_volume_ml),
            ventricular_effacement: None,
            cortical_involvement: f.cortical_involvement.value().copied(),
        }
    }
}

const DIR: &str = r"(?P<dir>right-to-left|left-to-right|leftward|rightward|left|right)";
const NUM: &str = r"(?P<mm>\d+(?:\.\d+)?)";

static MLS_NUM_FIRST: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(r"(?i){NUM}\s*mm\s+(?:of\s+)?{DIR}\s+(?:midline\s+)?shift")).unwrap()
});
static MLS_DIR_FIRST: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i){DIR}\s+midline\s+shift\s+(?:of|by|measuring)\s+(?:approximately\s+|about\s+|up\s+to\s+)?{NUM}\s*mm"
    ))
    .unwrap()
});
static MLS_TRAILING_DIR: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)midline\s+shift\s+(?:of|by|measuring)\s+(?:approximately\s+|about\s+)?{NUM}\s*mm\s+(?:to|toward|towards)\s+the\s+{DIR}"
    ))
    .unwrap()
});
static NO_SHIFT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bno\s+(?:\w+\s+)?midline\s+shift\b").unwrap());
static SIZE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)measur(?:es|ing|ed)\s+(?:approximately\s+|about\s+|up\s+to\s+)?(\d+(?:\.\d+)?)\s*(?:x|×)\s*(\d+(?:\.\d+)?)(?:\s*(?:x|×)\s*(\d+(?:\.\d+)?))?\s*cm",
    )
    .unwrap()
});
static COUNT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(\d+|two|three|four|five|six|seven|eight|nine|ten)\s+(?:(?:separate|distinct|discrete|enhancing|intracranial)\s+)?(?:lesions|masses|tumors|foci)\b",
    )
    .unwrap()
});
static SOLITARY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(solitary|single|unifocal)\b[^.]*\b(lesion|mass|tumor)").unwrap());
static VOLUME: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)total\s+tumou?r\s+volume\s+(?:is|of|measures|measuring)?\s*(?:approximately\s+|about\s+)?(\d+(?:\.\d+)?)\s*(?:mL|cc)\b")
        .unwrap()
});
static SIDE_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(bilateral|right|left)(?:-sided)?\b").unwrap());
static MASS_WORD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(mass|masses|lesion|lesions|tumor|tumour|neoplasm)\b").unwrap());
static SENTENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[^.!?\n]+(?:\.\d+[^.!?\n]*)*[.!?]?").unwrap());
static NEGATION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(no|not|without|absent)\b").unwrap());
static CORTICAL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)cortical\s+involvement|involv\w*\s+(?:of\s+)?the\s+(?:overlying\s+)?cortex|invad\w*\s+the\s+cortex").unwrap()
});

fn direction(word: &str) -> Hemisphere {
    match word.to_ascii_lowercase().as_str() {
        "left" | "leftward" | "right-to-left" => Hemisphere::Left,
        _ => Hemisphere::Right,
    }
}

fn count_word(w: &str) -> Option<usize> {
    let n = match w.to_ascii_lowercase().as_str() {
        "two" => 2,
        "three" => 3,
        "four" => 4,
        "five" => 5,
        "six" => 6,
        "seven" => 7,
        "eight" => 8,
        "nine" => 9,
        "ten" => 10,
        d => return d.parse().ok(),
    };
    Some(n)
}

fn sentences(text: &str) -> impl Iterator<Item = &str> {
    SENTENCE.find_iter(text).map(|m| m.as_str().trim())
}

/// Best-effort pattern extraction of findings features.
pub fn parse_report_findings(text: &str) -> ExtractedReportFeatures {
    let mut out = ExtractedReportFeatures::default();

    let mls = [&*MLS_NUM_FIRST, &*MLS_DIR_FIRST, &*MLS_TRAILING_DIR]
        .iter()
        .filter_map(|re| re.captures(text))
        .min_by_key(|c| c.get(0).unwrap().start());
    if let Some(c) = mls {
        out.mls_mm = c["mm"].parse().ok();
        out.mls_direction = Some(direction(&c["dir"]));
    } else if NO_SHIFT.is_match(text) {
        out.mls_mm = Some(0.0);
    }

    if let Some(c) = SIZE.captures(text) {
        out.lesion_sizes_cm = Some(
            (1..=3)
                .filter_map(|i| c.get(i).and_then(|m| m.as_str().parse().ok()))
                .collect(),
        );
    }

    if let Some(c) = COUNT.captures(text) {
        out.num_lesions = count_word(&c[1]);
    } else if SOLITARY.is_match(text) {
        out.num_lesions = Some(1);
    }

    if let Some(c) = VOLUME.captures(text) {
        out.tumor_volume_ml = c[1].parse().ok();
    }

    for s in sentences(text) {
        let lower = s.to_ascii_lowercase();
        if out.side.is_none()
            && MASS_WORD.is_match(s)
            && !lower.contains("midline")
            && !lower.contains("ventric")
        {
            if let Some(m) = SIDE_WORD.captures(s) {
                out.side = Some(match m[1].to_ascii_lowercase().as_str() {
                    "left" => Side::Left,
                    "right" => Side::Right,
                    _ => Side::Bilateral,
                });
            }
        }
        if out.ventricular_effacement.is_none()
            && (lower.contains("effaced") || lower.contains("effacement"))
            && lower.contains("ventric")
        {
            out.ventricular_effacement = Some(!NEGATION.is_match(s));
        }
        if out.cortical_involvement.is_none() && CORTICAL.is_match(s) {
            out.cortical_involvement = Some(!NEGATION.is_match(s));
        }
    }
    out
}

/// Per-feature comparison of one report against a reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    /// Feature name -> values match.
    pub categorical: BTreeMap<String, bool>,
    /// Feature name -> absolute error.
    pub numeric: BTreeMap<String, f64>,
}

pub fn feature_agreement(
    extracted: &ExtractedReportFeatures,
    reference: &ExtractedReportFeatures,
) -> Result<AgreementRecord, ReportError> {
    let mut r = AgreementRecord::default();
    let mut num = |name: &str, a: Option<f64>, b: Option<f64>| {
        if let (Some(a), Some(b)) = (a, b) {
            r.numeric.insert(name.into(), (a - b).abs());
        }
    };
    num("mls_mm", extracted.mls_mm, reference.mls_mm);
    num(
        "num_lesions",
        extracted.num_lesions.map(|n| n as f64),
        reference.num_lesions.map(|n| n as f64),
    );
    num("tumor_volume_ml", extracted.tumor_volume_ml, reference.tumor_volume_ml);
    if let (Some(a), Some(b)) = (&extracted.lesion_sizes_cm, &reference.lesion_sizes_cm) {
        let n = a.len().min(b.len());
        if n > 0 {
            let mae = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
            r.numeric.insert("lesion_sizes_cm".into(), mae);
        }
    }
    let mut cat = |name: &str, eq: Option<bool>| {
        if let Some(eq) = eq {
            r.categorical.insert(name.into(), eq);
        }
    };
    fn both<T: PartialEq>(a: &Option<T>, b: &Option<T>) -> Option<bool> {
        match (a, b) {
            (Some(a), Some(b)) => Some(a == b),
            _ => None,
        }
    }
    cat("mls_direction", both(&extracted.mls_direction, &reference.mls_direction));
    cat("side_of_epicenter", both(&extracted.side, &reference.side));
    cat(
        "ventricular_effacement",
        both(&extracted.ventricular_effacement, &reference.ventricular_effacement),
    );
    cat(
        "cortical_involvement",
        both(&extracted.cortical_involvement, &reference.cortical_involvement),
    );
    if r.categorical.is_empty() && r.numeric.is_empty() {
        return Err(ReportError::NoOverlap);
    }
    Ok(r)
}

/// Corpus-level accuracy (categorical) or mean absolute error (numeric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScore {
    pub n: usize,
    pub categorical: bool,
    /// Accuracy for categorical features, MAE for numeric ones.
    pub mean: f64,
    pub std: f64,
}

pub fn summarize_agreement(records: &[AgreementRecord]) -> BTreeMap<String, FeatureScore> {
    let mut cat: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut num: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (k, &v) in &r.categorical {
            cat.entry(k).or_default().push(if v { 1.0 } else { 0.0 });
        }
        for (k, &v) in &r.numeric {
            num.entry(k).or_default().push(v);
        }
    }
    let score = |xs: &[f64], categorical: bool| {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        FeatureScore {
            n: xs.len(),
            categorical,
            mean,
            std: var.sqrt(),
        }
    };
    cat.iter()
        .map(|(k, v)| (k.to_string(), score(v, true)))
        .chain(num.iter().map(|(k, v)| (k.to_string(), score(v, false))))
        .collect()
}
