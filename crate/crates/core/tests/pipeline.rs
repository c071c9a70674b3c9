use std::time::Instant;

use neurofind_core::anatomy::{AnatomyScheme, Hemisphere};
use neurofind_core::llm::ChatBackend;
use neurofind_core::midline::{ideal_midline, midline_deviation};
use neurofind_core::phantom::{build_phantom, random_spec, LesionSpec, PhantomSpec};
use neurofind_core::reportgen::{
    build_prompt, feature_agreement, generate_report, parse_report_findings, summarize_agreement,
    validate_report, ExtractedReportFeatures, PromptTemplate, TemplateBackend, TemplateVariant, Tolerances,
};
use neurofind_core::vasari::{extract_features, FeatureConfig, Measured, Side};

#[test]
fn bowed_midline_is_measured() {
    for (shift, dir) in [(-6, Hemisphere::Left), (9, Hemisphere::Right)] {
        let p = build_phantom(&PhantomSpec {
            shift_vox: shift,
            ..PhantomSpec::default()
        });
        let ideal = ideal_midline(&p.midline).unwrap();
        let r = midline_deviation(&p.midline, &ideal).unwrap();
        assert!((r.max_mls_mm - shift.abs() as f64).abs() <= 0.5, "{}", r.max_mls_mm);
        assert_eq!(r.direction, Some(dir));
    }
}

#[test]
fn phantom_case_extracts_expected_features() {
    let spec = PhantomSpec {
        shift_vox: -8,
        lesions: vec![LesionSpec {
            center: [45.0, 36.0, 26.0],
            ncr_radius: 3.0,
            core_radius: 6.0,
            edema_radius: 9.0,
        }],
        ..PhantomSpec::default()
    };
    let p = build_phantom(&spec);
    let ex = extract_features(
        &p.case_inputs("ph-1"),
        &FeatureConfig::default(),
        &AnatomyScheme::synthseg_dk(),
    )
    .unwrap();
    let f = &ex.features;
    assert_eq!(f.num_lesions, 1);
    assert_eq!(f.side_of_epicenter, Measured::Value(Side::Right));
    assert_eq!(f.mls_direction, Measured::Value(Hemisphere::Left));
    assert!((f.max_mls_mm.value().unwrap() - 8.0).abs() <= 0.5);
    assert_eq!(f.level_of_max_mls.value().map(String::as_str), Some("level of the lateral ventricles"));
    let props = f.prop_necrosis + f.prop_enhancing + f.prop_edema;
    assert!((props - 1.0).abs() < 1e-3);
    // a sphere of radius 6 spans 13 voxels on each axis
    assert!(f.lesion_sizes_cm[0].iter().all(|d| (d - 1.9).abs() <= 0.1), "{:?}", f.lesion_sizes_cm);
}

#[tokio::test]
async fn round_trip_agreement_on_random_phantoms() {
    let t0 = Instant::now();
    let config = FeatureConfig::default();
    let scheme = AnatomyScheme::synthseg_dk();
    let template = PromptTemplate::bundled(TemplateVariant::Full);
    let backend = TemplateBackend;
    let mut records = Vec::new();
    for seed in 0..30 {
        let p = build_phantom(&random_spec(seed));
        let f = extract_features(&p.case_inputs(&format!("case-{seed:03}")), &config, &scheme)
            .unwrap()
            .features;
        let prompt = build_prompt(&f, &template).unwrap();
        let report = generate_report(&f.subject_id, &prompt, &backend as &dyn ChatBackend)
            .await
            .unwrap();
        let errors: Vec<_> = validate_report(&report.findings_text, &f, &Tolerances::default());
        assert!(errors.is_empty(), "{seed}: {errors:?}\n{}", report.findings_text);
        let parsed = parse_report_findings(&report.findings_text);
        records.push(feature_agreement(&parsed, &ExtractedReportFeatures::from_features(&f)).unwrap());
    }
    let summary = summarize_agreement(&records);
    assert_eq!(summary["side_of_epicenter"].mean, 1.0);
    assert_eq!(summary["side_of_epicenter"].n, 30);
    assert!(summary["mls_mm"].mean <= 0.5);
    assert_eq!(summary["num_lesions"].mean, 0.0);
    eprintln!("round trip: {:.2} s", t0.elapsed().as_secs_f64());
}
