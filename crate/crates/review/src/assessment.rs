//! Reviewer assessment documents and their validation.
//!
//! Validation walks the raw JSON so every problem is reported against a
//! field path, then the checked document is deserialized into [`Assessment`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationLevel {
    None,
    Minor,
    Major,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationType {
    IncorrectAnatomicalLocation,
    IncorrectTumorCharacteristics,
    IncorrectClinicalImplication,
    FabricatedFinding,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingLevel {
    No,
    Some,
    Many,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingElement {
    TumorSizeExtent,
    EnhancementCharacteristics,
    EdemaMassEffect,
    MidlineShift,
    Multifocality,
    InvasionEloquentCortex,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntendedUse {
    FirstDraft,
    CrossCheck,
    SummaryAid,
    WouldNotUse,
}

/// 1 = strongly disagree .. 4 = strongly agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Likert {
    pub decision_support: u8,
    pub clinical_accuracy: u8,
    pub clinical_omission: u8,
    pub clinical_structure: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAssessment {
    pub hallucination: HallucinationLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_types: Option<Vec<HallucinationType>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination_other: Option<String>,
    pub missing: MissingLevel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_elements: Option<Vec<MissingElement>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub missing_other: Option<String>,
    pub intended_use: IntendedUse,
    pub likert: Likert,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comments: Option<String>,
}

/// Two-point distance drawn on an axial slice; points are (column, row)
/// pixel coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub sequence: String,
    pub z: usize,
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub distance_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub schema_version: u32,
    pub case_id: String,
    pub reviewer_id: String,
    /// Keyed by slot label ("A", "B", ...).
    pub reports: BTreeMap<String, ReportAssessment>,
    /// Slot labels, best first.
    pub ranking: Vec<String>,
    #[serde(default)]
    pub measurements: Vec<Measurement>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comments: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// What the validator needs to know about the case being assessed.
#[derive(Debug, Clone)]
pub struct CaseContext {
    pub slots: Vec<String>,
    pub sequences: Vec<String>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

/// Tolerance between a submitted distance and the one recomputed from the
/// points and pixel spacing.
pub const DISTANCE_TOL_MM: f64 = 0.01;

pub fn pixel_distance_mm(p1: [f64; 2], p2: [f64; 2], spacing: [f64; 3]) -> f64 {
    let dx = (p2[0] - p1[0]) * spacing[0];
    let dy = (p2[1] - p1[1]) * spacing[1];
    (dx * dx + dy * dy).sqrt()
}

struct Errors(Vec<FieldError>);

impl Errors {
    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.0.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }
}

fn enum_value<T: for<'de> Deserialize<'de>>(v: &Value) -> Option<T> {
    serde_json::from_value(v.clone()).ok()
}

fn allowed<T: Serialize>(variants: &[T]) -> String {
    variants
        .iter()
        .map(|v| serde_json::to_value(v).unwrap().as_str().unwrap_or_default().to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn nonempty_string(v: Option<&Value>) -> bool {
    v.and_then(Value::as_str).is_some_and(|s| !s.trim().is_empty())
}

/// Checks a multi-select that must be present iff `triggered`, plus its
/// free-text field that must be present iff "other" was selected.
#[allow(clippy::too_many_arguments)]
fn check_conditional<T>(
    errs: &mut Errors,
    obj: &serde_json::Map<String, Value>,
    prefix: &str,
    list_key: &str,
    other_key: &str,
    triggered: bool,
    trigger_desc: &str,
    all: &[T],
    other: T,
) where
    T: for<'de> Deserialize<'de> + Serialize + PartialEq + Ord + Copy,
{
    let field = format!("{prefix}.{list_key}");
    let other_field = format!("{prefix}.{other_key}");
    let list = obj.get(list_key).filter(|v| !v.is_null());
    let mut has_other = false;
    match (triggered, list) {
        (false, Some(_)) => errs.push(&field, format!("must be omitted unless {trigger_desc}")),
        (true, None) => errs.push(&field, format!("required when {trigger_desc}")),
        (true, Some(v)) => match v.as_array() {
            None => errs.push(&field, "must be an array"),
            Some(items) if items.is_empty() => errs.push(&field, "select at least one option"),
            Some(items) => {
                let mut seen = BTreeSet::new();
                for (i, item) in items.iter().enumerate() {
                    match enum_value::<T>(item) {
                        Some(t) => {
                            if !seen.insert(t) {
                                errs.push(format!("{field}[{i}]"), "duplicate option");
                            }
                            has_other |= t == other;
                        }
                        None => errs.push(format!("{field}[{i}]"), format!("expected one of: {}", allowed(all))),
                    }
                }
            }
        },
        (false, None) => {}
    }
    let text = obj.get(other_key).filter(|v| !v.is_null());
    if has_other {
        if !nonempty_string(text) {
            errs.push(&other_field, "required when \"other\" is selected");
        }
    } else if text.is_some() {
        errs.push(&other_field, "must be omitted unless \"other\" is selected");
    }
}

fn check_report(errs: &mut Errors, slot: &str, v: &Value) {
    let prefix = format!("reports.{slot}");
    let Some(obj) = v.as_object() else {
        errs.push(&prefix, "must be an object");
        return;
    };
    let level = match obj.get("hallucination") {
        None => {
            errs.push(format!("{prefix}.hallucination"), "required");
            None
        }
        Some(v) => {
            let l = enum_value::<HallucinationLevel>(v);
            if l.is_none() {
                errs.push(format!("{prefix}.hallucination"), "expected one of: none, minor, major");
            }
            l
        }
    };
    if let Some(level) = level {
        check_conditional(
            errs,
            obj,
            &prefix,
            "hallucination_types",
            "hallucination_other",
            level != HallucinationLevel::None,
            "hallucination is minor or major",
            &[
                HallucinationType::IncorrectAnatomicalLocation,
                HallucinationType::IncorrectTumorCharacteristics,
                HallucinationType::IncorrectClinicalImplication,
                HallucinationType::FabricatedFinding,
                HallucinationType::Other,
            ],
            HallucinationType::Other,
        );
    }

    let missing = match obj.get("missing") {
        None => {
            errs.push(format!("{prefix}.missing"), "required");
            None
        }
        Some(v) => {
            let l = enum_value::<MissingLevel>(v);
            if l.is_none() {
                errs.push(format!("{prefix}.missing"), "expected one of: no, some, many");
            }
            l
        }
    };
    if let Some(missing) = missing {
        check_conditional(
            errs,
            obj,
            &prefix,
            "missing_elements",
            "missing_other",
            missing != MissingLevel::No,
            "missing is some or many",
            &[
                MissingElement::TumorSizeExtent,
                MissingElement::EnhancementCharacteristics,
                MissingElement::EdemaMassEffect,
                MissingElement::MidlineShift,
                MissingElement::Multifocality,
                MissingElement::InvasionEloquentCortex,
                MissingElement::Other,
            ],
            MissingElement::Other,
        );
    }

    match obj.get("intended_use") {
        None => errs.push(format!("{prefix}.intended_use"), "required"),
        Some(v) if enum_value::<IntendedUse>(v).is_none() => errs.push(
            format!("{prefix}.intended_use"),
            "expected one of: first_draft, cross_check, summary_aid, would_not_use",
        ),
        _ => {}
    }

    match obj.get("likert").and_then(Value::as_object) {
        None => errs.push(format!("{prefix}.likert"), "required object"),
        Some(l) => {
            for key in ["decision_support", "clinical_accuracy", "clinical_omission", "clinical_structure"] {
                let ok = l.get(key).and_then(Value::as_u64).is_some_and(|x| (1..=4).contains(&x));
                if !ok {
                    errs.push(format!("{prefix}.likert.{key}"), "must be an integer from 1 to 4");
                }
            }
            for key in l.keys() {
                if !["decision_support", "clinical_accuracy", "clinical_omission", "clinical_structure"]
                    .contains(&key.as_str())
                {
                    errs.push(format!("{prefix}.likert.{key}"), "unknown field");
                }
            }
        }
    }
    if let Some(c) = obj.get("comments") {
        if !c.is_null() && !c.is_string() {
            errs.push(format!("{prefix}.comments"), "must be a string");
        }
    }
}

fn check_measurement(errs: &mut Errors, i: usize, v: &Value, ctx: &CaseContext) {
    let prefix = format!("measurements[{i}]");
    let Some(obj) = v.as_object() else {
        errs.push(&prefix, "must be an object");
        return;
    };
    match obj.get("sequence").and_then(Value::as_str) {
        Some(s) if ctx.sequences.iter().any(|x| x == s) => {}
        _ => errs.push(
            format!("{prefix}.sequence"),
            format!("expected one of: {}", ctx.sequences.join(", ")),
        ),
    }
    match obj.get("z").and_then(Value::as_u64) {
        Some(z) if (z as usize) < ctx.dims[2] => {}
        _ => errs.push(format!("{prefix}.z"), format!("must be a slice index below {}", ctx.dims[2])),
    }
    let point = |key: &str, errs: &mut Errors| -> Option<[f64; 2]> {
        let p: Option<[f64; 2]> = obj.get(key).and_then(|v| serde_json::from_value(v.clone()).ok());
        match p {
            Some(p)
                if p.iter().all(|c| c.is_finite())
                    && (0.0..=ctx.dims[0] as f64).contains(&p[0])
                    && (0.0..=ctx.dims[1] as f64).contains(&p[1]) =>
            {
                Some(p)
            }
            _ => {
                errs.push(
                    format!("{prefix}.{key}"),
                    format!("must be [column, row] within {}x{}", ctx.dims[0], ctx.dims[1]),
                );
                None
            }
        }
    };
    let p1 = point("p1", errs);
    let p2 = point("p2", errs);
    match obj.get("distance_mm").and_then(Value::as_f64) {
        None => errs.push(format!("{prefix}.distance_mm"), "required number"),
        Some(d) => {
            if let (Some(p1), Some(p2)) = (p1, p2) {
                let expect = pixel_distance_mm(p1, p2, ctx.spacing);
                if (d - expect).abs() > DISTANCE_TOL_MM {
                    errs.push(
                        format!("{prefix}.distance_mm"),
                        format!("{d} does not match {expect:.3} mm from the points and pixel spacing"),
                    );
                }
            }
        }
    }
}

/// Validates a submitted document against the case it refers to.
pub fn validate_assessment(v: &Value, ctx: &CaseContext) -> Result<Assessment, Vec<FieldError>> {
    let mut errs = Errors(Vec::new());
    let Some(obj) = v.as_object() else {
        errs.push("$", "assessment must be a JSON object");
        return Err(errs.0);
    };
    match obj.get("schema_version").and_then(Value::as_u64) {
        Some(x) if x == SCHEMA_VERSION as u64 => {}
        _ => errs.push("schema_version", format!("must be {SCHEMA_VERSION}")),
    }
    for key in ["case_id", "reviewer_id"] {
        if !nonempty_string(obj.get(key)) {
            errs.push(key, "required non-empty string");
        }
    }

    match obj.get("reports").and_then(Value::as_object) {
        None => errs.push("reports", "required object keyed by slot"),
        Some(reports) => {
            for slot in &ctx.slots {
                match reports.get(slot) {
                    Some(r) => check_report(&mut errs, slot, r),
                    None => errs.push(format!("reports.{slot}"), "missing assessment for this slot"),
                }
            }
            for key in reports.keys() {
                if !ctx.slots.contains(key) {
                    errs.push(format!("reports.{key}"), "unknown slot");
                }
            }
        }
    }

    match obj.get("ranking").and_then(Value::as_array) {
        None => errs.push("ranking", "required array of slot labels"),
        Some(items) => {
            let ranked: Vec<Option<&str>> = items.iter().map(Value::as_str).collect();
            let set: BTreeSet<&str> = ranked.iter().flatten().copied().collect();
            let expected: BTreeSet<&str> = ctx.slots.iter().map(String::as_str).collect();
            if ranked.iter().any(Option::is_none) || set.len() != ranked.len() || set != expected {
                errs.push(
                    "ranking",
                    format!("must rank each of {} exactly once", ctx.slots.join(", ")),
                );
            }
        }
    }

    match obj.get("measurements") {
        None | Some(Value::Null) => {}
        Some(Value::Array(ms)) => {
            for (i, m) in ms.iter().enumerate() {
                check_measurement(&mut errs, i, m, ctx);
            }
        }
        Some(_) => errs.push("measurements", "must be an array"),
    }
    for key in ["comments", "started_at"] {
        if let Some(c) = obj.get(key) {
            if !c.is_null() && !c.is_string() {
                errs.push(key, "must be a string");
            }
        }
    }

    if !errs.0.is_empty() {
        return Err(errs.0);
    }
    serde_json::from_value(v.clone()).map_err(|e| {
        vec![FieldError {
            field: "$".into(),
            message: e.to_string(),
        }]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn ctx() -> CaseContext {
        CaseContext {
            slots: vec!["A".into(), "B".into()],
            sequences: vec!["t1c".into(), "t2f".into()],
            dims: [64, 64, 20],
            spacing: [0.5, 0.5, 2.0],
        }
    }

    fn report() -> Value {
        json!({
            "hallucination": "none",
            "missing": "no",
            "intended_use": "first_draft",
            "likert": {"decision_support": 3, "clinical_accuracy": 4, "clinical_omission": 2, "clinical_structure": 1}
        })
    }

    fn doc() -> Value {
        json!({
            "schema_version": 1,
            "case_id": "c1",
            "reviewer_id": "r1",
            "reports": {"A": report(), "B": report()},
            "ranking": ["B", "A"],
            "measurements": [],
        })
    }

    fn fields(v: &Value) -> Vec<String> {
        validate_assessment(v, &ctx())
            .unwrap_err()
            .into_iter()
            .map(|e| e.field)
            .collect()
    }

    #[test]
    fn minimal_document_is_valid() {
        let a = validate_assessment(&doc(), &ctx()).unwrap();
        assert_eq!(a.ranking, vec!["B", "A"]);
        assert_eq!(a.reports["A"].likert.clinical_accuracy, 4);
        assert_eq!(serde_json::to_value(&a).unwrap(), doc());
    }

    #[test]
    fn conditional_fields() {
        let mut d = doc();
        d["reports"]["A"]["hallucination"] = json!("minor");
        assert_eq!(fields(&d), vec!["reports.A.hallucination_types"]);

        d["reports"]["A"]["hallucination_types"] = json!(["fabricated_finding", "other"]);
        assert_eq!(fields(&d), vec!["reports.A.hallucination_other"]);
        d["reports"]["A"]["hallucination_other"] = json!("laterality swapped");
        assert!(validate_assessment(&d, &ctx()).is_ok());

        d["reports"]["B"]["missing_elements"] = json!(["midline_shift"]);
        assert_eq!(fields(&d), vec!["reports.B.missing_elements"]);
        d["reports"]["B"]["missing"] = json!("many");
        assert!(validate_assessment(&d, &ctx()).is_ok());
        d["reports"]["B"]["missing_elements"] = json!(["midline_shift", "bogus"]);
        assert_eq!(fields(&d), vec!["reports.B.missing_elements[1]"]);
    }

    #[test]
    fn likert_range() {
        let mut d = doc();
        d["reports"]["B"]["likert"]["clinical_structure"] = json!(5);
        d["reports"]["A"]["likert"]["decision_support"] = json!(0);
        assert_eq!(
            fields(&d),
            vec!["reports.A.likert.decision_support", "reports.B.likert.clinical_structure"]
        );
    }

    #[test]
    fn ranking_must_be_a_permutation() {
        for bad in [json!(["A"]), json!(["A", "A"]), json!(["A", "C"]), json!(["A", "B", "B"]), json!([1, 2])] {
            let mut d = doc();
            d["ranking"] = bad;
            assert_eq!(fields(&d), vec!["ranking"]);
        }
    }

    #[test]
    fn slots_must_match() {
        let mut d = doc();
        d["reports"].as_object_mut().unwrap().remove("B");
        d["reports"]["Z"] = report();
        assert_eq!(fields(&d), vec!["reports.B", "reports.Z"]);
    }

    #[test]
    fn measurement_distance_uses_spacing() {
        let mut d = doc();
        d["measurements"] = json!([{"sequence": "t1c", "z": 3, "p1": [1.0, 1.0], "p2": [4.0, 5.0], "distance_mm": 2.5}]);
        let a = validate_assessment(&d, &ctx()).unwrap();
        assert_eq!(a.measurements[0].distance_mm, 2.5);

        d["measurements"][0]["distance_mm"] = json!(5.0);
        assert_eq!(fields(&d), vec!["measurements[0].distance_mm"]);
        d["measurements"][0]["z"] = json!(20);
        d["measurements"][0]["sequence"] = json!("t1n");
        assert_eq!(
            fields(&d),
            vec!["measurements[0].sequence", "measurements[0].z", "measurements[0].distance_mm"]
        );
    }

    #[test]
    fn wrong_schema_version() {
        let mut d = doc();
        d["schema_version"] = json!(2);
        assert_eq!(fields(&d), vec!["schema_version"]);
    }
}
