use crate::anatomy::Hemisphere;
use crate::vasari::{EnhancementQuality, EnhancementThickness, FeatureSet, Focality, Measured, Side};

fn pct(p: f64) -> String {
    format!("{:.0}%", p * 100.0)
}

fn dims(d: &[f64; 3]) -> String {
    format!("{:.1} x {:.1} x {:.1} cm (AP x TV x CC)", d[0], d[1], d[2])
}

fn join_and(items: &[String]) -> String {
    match items {
        [] => String::new(),
        [a] => a.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// Canonical findings text for a feature document: a fixed sentence per
/// available descriptor, arranged in the two usual subsections.
pub fn render_findings(f: &FeatureSet) -> String {
    let mut mass = Vec::new();
    if let Measured::Value(mm) = f.max_mls_mm {
        let level = f
            .level_of_max_mls
            .value()
            .cloned()
            .unwrap_or_else(|| "level of maximal deviation".into());
        let d = mm.round() as i64;
        match f.mls_direction.value() {
            Some(dir) => {
                let w = match dir {
                    Hemisphere::Left => "leftward",
                    Hemisphere::Right => "rightward",
                };
                if mm >= 5.0 {
                    mass.push(format!("There is a {d} mm {w} midline shift at the {level}."));
                } else {
                    mass.push(format!(
                        "No significant midline shift is present ({d} mm {w} midline shift at the {level})."
                    ));
                }
            }
            None => mass.push("There is no midline shift (0 mm).".into()),
        }
    }
    if let Measured::Value(a) = f.asymmetrical_ventricles {
        mass.push(if a {
            "The lateral ventricles are asymmetrical.".into()
        } else {
            "The lateral ventricles are symmetric.".into()
        });
    }
    if let Measured::Value(e) = f.enlarged_ventricles {
        mass.push(if e {
            "There is ventricular enlargement.".into()
        } else {
            "There is no ventricular enlargement.".into()
        });
    }

    let mut brain = Vec::new();
    let side = match f.side_of_epicenter.value() {
        Some(Side::Left) => "left-sided ",
        Some(Side::Right) => "right-sided ",
        Some(Side::Bilateral) => "bilateral ",
        None => "",
    };
    let location = match f.tumor_location.value() {
        Some(l) if !l.is_empty() => format!(" involving the {}", join_and(l)),
        _ => String::new(),
    };
    match f.lesion_sizes_cm.as_slice() {
        [] => brain.push("No measurable tumor core is identified.".into()),
        [only] => brain.push(format!("A solitary {side}lesion{location} measures {}.", dims(only))),
        [dominant, rest @ ..] => {
            let kind = match f.multifocal_or_multicentric.value() {
                Some(Focality::Multifocal) => " (multifocal)",
                Some(Focality::Multicentric) => " (multicentric)",
                _ => "",
            };
            brain.push(format!("There are {} lesions{kind}.", f.num_lesions));
            brain.push(format!("The dominant {side}lesion{location} measures {}.", dims(dominant)));
            for r in rest {
                brain.push(format!("A secondary lesion measures {}.", dims(r)));
            }
        }
    }
    match f.enhancement_quality {
        EnhancementQuality::Absent => brain.push("There is no enhancing component.".into()),
        q => {
            let q = if q == EnhancementQuality::Marked { "marked" } else { "mild" };
            let margin = match f.enhancement_thickness {
                EnhancementThickness::Thick => " with a thick (>3 mm) enhancing margin",
                EnhancementThickness::Thin => " with a thin enhancing margin",
                EnhancementThickness::NotApplicable => "",
            };
            brain.push(format!(
                "The mass shows {q} enhancement{margin}; approximately {} of the tumor volume enhances.",
                pct(f.prop_enhancing)
            ));
        }
    }
    if f.prop_necrosis > 0.0 {
        brain.push(format!(
            "A necrotic core comprises approximately {} of the lesion volume.",
            pct(f.prop_necrosis)
        ));
    }
    if f.ed_volume_ml > 0.0 {
        let crossing = match f.edema_crosses_midline {
            Measured::Value(true) => ", which crosses the midline",
            Measured::Value(false) => ", which does not cross the midline",
            Measured::Unavailable => "",
        };
        brain.push(format!(
            "There is surrounding vasogenic edema of {:.1} mL ({} of the total tumor volume){crossing}.",
            f.ed_volume_ml,
            pct(f.prop_edema)
        ));
    }
    match f.et_crosses_midline {
        Measured::Value(true) => brain.push("The enhancing component crosses the midline.".into()),
        Measured::Value(false) if f.enhancement_quality != EnhancementQuality::Absent => {
            brain.push("The enhancing component does not cross the midline.".into())
        }
        _ => {}
    }
    if f.multiple_satellites {
        brain.push("Small enhancing satellite nodules are present.".into());
    }
    if let Measured::Value(c) = f.cortical_involvement {
        brain.push(if c {
            "There is cortical involvement.".into()
        } else {
            "There is no cortical involvement.".into()
        });
    }
    if let Measured::Value(d) = f.deep_wm_invasion {
        brain.push(if d {
            "There is deep white matter invasion.".into()
        } else {
            "There is no deep white matter invasion.".into()
        });
    }
    if let Measured::Value(v) = f.ventricular_invasion {
        brain.push(if v {
            "There is ependymal invasion of the adjacent ventricle.".into()
        } else {
            "There is no ependymal invasion.".into()
        });
    }
    if let Some(e) = f.eloquent_brain.value() {
        if e.involved {
            brain.push(format!("There is eloquent brain ({}) involvement.", join_and(&e.functions)));
        }
    }
    brain.push(format!("The total tumor volume is {:.1} mL.", f.total_tumor_volume_ml));

    let mut out = String::new();
    if !mass.is_empty() {
        out.push_str("MASS EFFECT & VENTRICLES: ");
        out.push_str(&mass.join(" "));
        out.push_str("\n\n");
    }
    out.push_str("BRAIN / ENHANCEMENT: ");
    out.push_str(&brain.join(" "));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reportgen::fixtures;

    #[test]
    fn canonical_sentences() {
        let t = render_findings(&fixtures::features());
        assert!(t.starts_with("MASS EFFECT & VENTRICLES: There is a 12 mm leftward midline shift at the level of the lateral ventricles."));
        assert!(t.contains("A solitary right-sided lesion involving the right temporal lobe and right parietal lobe measures 7.1 x 5.6 x 5.3 cm (AP x TV x CC)."));
        assert!(t.contains("thick (>3 mm) enhancing margin; approximately 28% of the tumor volume enhances"));
        assert!(t.contains("83.6 mL (50% of the total tumor volume), which crosses the midline"));
        assert!(t.contains("eloquent brain (vision) involvement"));
        assert!(t.ends_with("The total tumor volume is 168.1 mL."));
    }

    #[test]
    fn minimal_shift_is_phrased_as_no_shift() {
        let mut f = fixtures::features();
        f.max_mls_mm = Measured::Value(3.4);
        f.mls_direction = Measured::Value(Hemisphere::Right);
        let t = render_findings(&f);
        assert!(t.contains("No significant midline shift is present (3 mm rightward midline shift"));
    }

    #[test]
    fn several_lesions() {
        let mut f = fixtures::features();
        f.num_lesions = 2;
        f.lesion_sizes_cm.push([1.0, 0.8, 0.9]);
        f.multifocal_or_multicentric = Measured::Value(Focality::Multifocal);
        let t = render_findings(&f);
        assert!(t.contains("There are 2 lesions (multifocal)."));
        assert!(t.contains("A secondary lesion measures 1.0 x 0.8 x 0.9 cm"));
    }
}
