//! VASARI-style categorical descriptors and the per-case feature document.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::anatomy::{
    connected_components_3d, merge_segmentations, tumor_statistics, ventricle_metrics, AnatomyError,
    AnatomyScheme, Connectivity, Hemisphere, LesionStats, MergedSegmentation, RegionKind,
    TumorScheme, TumorStatistics, VentricleThresholds,
};
use crate::midline::{
    crosses_midline, ideal_midline, midline_deviation, mls_level_label, side_counts, IdealMidline,
    MidlineError, MidlineResult,
};
use crate::morph::{distance_to_sites, inside_distance};
use crate::volume::{LabelVolume, Mask, Volume};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error(transparent)]
    Anatomy(#[from] AnatomyError),
    #[error(transparent)]
    Midline(#[from] MidlineError),
    #[error("tumour core is empty")]
    EmptyCore,
}

/// A value or an explicit "unavailable" marker, so that missing inputs
/// never silently drop a field from the feature document.
#[derive(Debug, Clone, PartialEq)]
pub enum Measured<T> {
    Value(T),
    Unavailable,
}

impl<T> Measured<T> {
    pub fn value(&self) -> Option<&T> {
        match self {
            Measured::Value(v) => Some(v),
            Measured::Unavailable => None,
        }
    }

    pub fn is_available(&self) -> bool {
        matches!(self, Measured::Value(_))
    }
}

impl<T> From<Option<T>> for Measured<T> {
    fn from(o: Option<T>) -> Self {
        o.map_or(Measured::Unavailable, Measured::Value)
    }
}

#[derive(Serialize, Deserialize)]
enum Marker {
    #[serde(rename = "unavailable")]
    Unavailable,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum MeasuredRepr<T> {
    Marker(Marker),
    Value(T),
}

impl<T: Serialize> Serialize for Measured<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Measured::Value(v) => v.serialize(s),
            Measured::Unavailable => Marker::Unavailable.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Measured<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match MeasuredRepr::deserialize(d)? {
            MeasuredRepr::Marker(_) => Measured::Unavailable,
            MeasuredRepr::Value(v) => Measured::Value(v),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
    Bilateral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhancementQuality {
    #[serde(rename = "None")]
    Absent,
    Mild,
    Marked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EnhancementThickness {
    Thin,
    Thick,
    NotApplicable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Focality {
    Solitary,
    Multifocal,
    Multicentric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloquentRegion {
    /// Anatomy-scheme region name.
    pub region: String,
    /// Function reported when the region is involved, e.g. "vision".
    pub function: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EloquentInvolvement {
    pub involved: bool,
    pub functions: Vec<String>,
    pub regions: Vec<String>,
}

/// Thresholds and label conventions used for feature extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub tumor_labels: TumorScheme,
    pub min_lesion_ml: f64,
    pub q_mild: f64,
    pub thick_margin_mm: f64,
    pub v_min_ml: f64,
    pub sat_max_ml: f64,
    pub deep_wm_mm: f64,
    pub side_fraction: f64,
    pub crossing_min_ml: f64,
    pub location_min_fraction: f64,
    pub location_max_regions: usize,
    pub ventricles: VentricleThresholds,
    /// Ventricular volume of the warped atlas; enlargement is unavailable
    /// without it.
    pub atlas_ventricle_ml: Option<f64>,
    pub eloquent: Vec<EloquentRegion>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        let el = |region: &str, function: &str| EloquentRegion {
            region: region.into(),
            function: function.into(),
        };
        let mut eloquent = Vec::new();
        for s in ["left", "right"] {
            eloquent.push(el(&format!("{s} precentral gyrus"), "motor"));
            eloquent.push(el(&format!("{s} paracentral lobule"), "motor"));
            eloquent.push(el(&format!("{s} postcentral gyrus"), "sensory"));
            eloquent.push(el(&format!("{s} pericalcarine cortex"), "vision"));
            eloquent.push(el(&format!("{s} cuneus"), "vision"));
            eloquent.push(el(&format!("{s} lingual gyrus"), "vision"));
        }
        eloquent.push(el("left pars opercularis", "language"));
        eloquent.push(el("left pars triangularis", "language"));
        FeatureConfig {
            tumor_labels: TumorScheme::default(),
            min_lesion_ml: 0.05,
            q_mild: 0.05,
            thick_margin_mm: 3.0,
            v_min_ml: 0.1,
            sat_max_ml: 1.0,
            deep_wm_mm: 10.0,
            side_fraction: 0.6,
            crossing_min_ml: 1.0,
            location_min_fraction: 0.15,
            location_max_regions: 3,
            ventricles: VentricleThresholds::default(),
            atlas_ventricle_ml: None,
            eloquent,
        }
    }
}

impl FeatureConfig {
    /// SHA-256 of the canonical JSON form of this configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub anatomy_scheme: String,
    pub config_sha256: String,
    pub thresholds: FeatureConfig,
}

/// The per-case descriptor document. Its pretty-printed JSON form is what
/// gets inserted into report-generation prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub subject_id: String,
    pub age: Measured<f64>,
    pub sex: Measured<String>,
    pub total_tumor_volume_ml: f64,
    /// [AP, TV, CC] per lesion, dominant first.
    pub lesion_sizes_cm: Vec<[f64; 3]>,
    pub prop_necrosis: f64,
    pub num_lesions: usize,
    pub prop_enhancing: f64,
    pub prop_edema: f64,
    pub cortical_involvement: Measured<bool>,
    pub tumor_location: Measured<Vec<String>>,
    pub ventricular_invasion: Measured<bool>,
    pub side_of_epicenter: Measured<Side>,
    pub enhancement_quality: EnhancementQuality,
    pub enhancement_thickness: EnhancementThickness,
    pub multiple_satellites: bool,
    pub multifocal_or_multicentric: Measured<Focality>,
    pub deep_wm_invasion: Measured<bool>,
    pub eloquent_brain: Measured<EloquentInvolvement>,
    pub level_of_max_mls: Measured<String>,
    pub max_mls_mm: Measured<f64>,
    pub mls_direction: Measured<Hemisphere>,
    pub edema_crosses_midline: Measured<bool>,
    pub et_crosses_midline: Measured<bool>,
    pub asymmetrical_ventricles: Measured<bool>,
    pub enlarged_ventricles: Measured<bool>,
    pub ed_volume_ml: f64,
    pub provenance: Provenance,
}

/// One entry of the descriptor inventory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Descriptor {
    pub label: &'static str,
    /// JSON keys carrying the descriptor.
    pub keys: &'static [&'static str],
    /// Reported as a significant overall-survival predictor.
    pub survival_predictor: bool,
}

const fn d(label: &'static str, keys: &'static [&'static str], survival_predictor: bool) -> Descriptor {
    Descriptor {
        label,
        keys,
        survival_predictor,
    }
}

/// The 22 descriptors carried by a [`FeatureSet`].
pub const DESCRIPTORS: [Descriptor; 22] = [
    d("Total tumor volume (mL)", &["total_tumor_volume_ml"], true),
    d("3D Lesion Sizes (cm)", &["lesion_sizes_cm"], false),
    d("Proportion of Necrosis", &["prop_necrosis"], false),
    d("Number of lesions", &["num_lesions"], false),
    d("Proportion of Enhancing", &["prop_enhancing"], true),
    d("Proportion of Edema", &["prop_edema"], false),
    d("Cortical involvement", &["cortical_involvement"], false),
    d("Tumor Location", &["tumor_location"], true),
    d("Ventricular Invasion", &["ventricular_invasion"], true),
    d("Side of Tumor Epicenter", &["side_of_epicenter"], false),
    d("Enhancement Quality", &["enhancement_quality"], false),
    d("Enhancement thickness", &["enhancement_thickness"], false),
    d("Multiple satellites present", &["multiple_satellites"], false),
    d("Multifocal or Multicentric", &["multifocal_or_multicentric"], true),
    d("Deep WM invasion", &["deep_wm_invasion"], true),
    d("Eloquent Brain Involved", &["eloquent_brain"], false),
    d("Level of max MLS", &["level_of_max_mls"], true),
    d("Max MLS (mm) + L/R", &["max_mls_mm", "mls_direction"], true),
    d("Edema crosses midline", &["edema_crosses_midline"], true),
    d("ET Crosses midline", &["et_crosses_midline"], true),
    d("Asymmetrical Ventricles", &["asymmetrical_ventricles"], false),
    d("Enlarged Ventricles", &["enlarged_ventricles"], true),
];

impl FeatureSet {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("feature set serializes")
    }
}

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    let r = (x * f).round() / f;
    // avoid "-0.0" in serialized output
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

/// Side holding more than `fraction` of the tumour core; voxels on the
/// ideal line count half to each side.
pub fn side_of_epicenter(
    merged: &MergedSegmentation,
    ideal: &IdealMidline,
    fraction: f64,
) -> Result<Side, FeatureError> {
    let c = side_counts(&merged.core_mask(), ideal)?;
    let total = (c.left + c.right + c.on_line) as f64;
    if total == 0.0 {
        return Err(FeatureError::EmptyCore);
    }
    let half = c.on_line as f64 / 2.0;
    let left = (c.left as f64 + half) / total;
    let right = (c.right as f64 + half) / total;
    Ok(if right > fraction {
        Side::Right
    } else if left > fraction {
        Side::Left
    } else {
        Side::Bilateral
    })
}

/// Enhancement quality from the enhancing proportion, and margin thickness
/// from the dominant enhancing component.
///
/// Thickness is the median of 2·EDT over the component's ridge voxels
/// (local maxima of the inside distance), i.e. the wall's full width
/// measured across its centre.
pub fn enhancement_features(
    merged: &MergedSegmentation,
    prop_enhancing: f64,
    q_mild: f64,
    thick_margin_mm: f64,
) -> (EnhancementQuality, EnhancementThickness) {
    if prop_enhancing <= 0.0 {
        return (EnhancementQuality::Absent, EnhancementThickness::NotApplicable);
    }
    let quality = if prop_enhancing < q_mild {
        EnhancementQuality::Mild
    } else {
        EnhancementQuality::Marked
    };
    let comps = connected_components_3d(&merged.et_mask(), Connectivity::TwentySix);
    if comps.count() == 0 {
        return (quality, EnhancementThickness::NotApplicable);
    }
    let dominant = comps.mask_of(1);
    let edt = inside_distance(&dominant);
    let grid = *dominant.grid();
    let offsets = Connectivity::TwentySix.offsets();
    let mut ridge = Vec::new();
    for (idx, &inside) in dominant.data().iter().enumerate() {
        if !inside {
            continue;
        }
        let [i, j, k] = grid.coords(idx);
        let is_max = offsets.iter().all(|o| {
            let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
            !grid.contains(a, b, c) || edt[grid.index(a as usize, b as usize, c as usize)] <= edt[idx]
        });
        if is_max {
            ridge.push(2.0 * edt[idx]);
        }
    }
    ridge.sort_by(f64::total_cmp);
    let n = ridge.len();
    let median = if n % 2 == 1 {
        ridge[n / 2]
    } else {
        (ridge[n / 2 - 1] + ridge[n / 2]) / 2.0
    };
    let thickness = if median > thick_margin_mm {
        EnhancementThickness::Thick
    } else {
        EnhancementThickness::Thin
    };
    (quality, thickness)
}

/// Focality from how lesions share whole-tumour envelopes, and whether any
/// non-dominant enhancing component is small enough to be a satellite.
pub fn focality_and_satellites(
    lesions: &LesionStats,
    merged: &MergedSegmentation,
    min_lesion_ml: f64,
    sat_max_ml: f64,
) -> Result<(Focality, bool), FeatureError> {
    if lesions.num_lesions() == 0 {
        return Err(FeatureError::EmptyCore);
    }
    let focality = if lesions.num_lesions() == 1 {
        Focality::Solitary
    } else {
        let env = connected_components_3d(&merged.whole_tumor_mask(), Connectivity::TwentySix);
        let mut per_envelope: BTreeMap<u32, std::collections::BTreeSet<u32>> = BTreeMap::new();
        for (&l, &e) in lesions.lesion_map.data().iter().zip(env.labels.data()) {
            if l != 0 {
                per_envelope.entry(e).or_default().insert(l);
            }
        }
        if per_envelope.values().any(|s| s.len() >= 2) {
            Focality::Multifocal
        } else {
            Focality::Multicentric
        }
    };
    let vml = merged.voxel_ml();
    let et = connected_components_3d(&merged.et_mask(), Connectivity::TwentySix);
    let satellites = et.sizes.iter().skip(1).any(|&n| {
        let v = n as f64 * vml;
        v >= min_lesion_ml && v < sat_max_ml
    });
    Ok((focality, satellites))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Involvement {
    pub cortical: bool,
    pub deep_wm: bool,
    pub ventricular: bool,
    pub eloquent: EloquentInvolvement,
}

/// Cortical, deep white matter, ventricular (ependymal) and eloquent-cortex
/// involvement, against the pre-merge anatomy.
pub fn involvement_flags(merged: &MergedSegmentation, config: &FeatureConfig) -> Involvement {
    let grid = *merged.anatomy.grid();
    let vml = grid.voxel_ml();
    let whole = merged.whole_tumor_mask();
    let overlap_ml = |region: &Mask| {
        region
            .data()
            .iter()
            .zip(whole.data())
            .filter(|(&r, &t)| r && t)
            .count() as f64
            * vml
    };

    let cortex = merged.anatomy_mask(|r| r.kind == RegionKind::Cortex);
    let cortical = overlap_ml(&cortex) >= config.v_min_ml;

    let ventricles = merged.anatomy_mask(|r| r.kind.is_ventricle());
    let deep_wm = if ventricles.count_true() == 0 {
        false
    } else {
        let dist = distance_to_sites(&grid, ventricles.data());
        let wm = merged.anatomy_mask(|r| r.kind == RegionKind::WhiteMatter);
        let near: Vec<bool> = wm
            .data()
            .iter()
            .zip(&dist)
            .map(|(&w, &d)| w && d <= config.deep_wm_mm)
            .collect();
        overlap_ml(&Volume::from_vec(grid, near).expect("same grid")) >= config.v_min_ml
    };

    let core = merged.core_mask();
    let offsets = Connectivity::TwentySix.offsets();
    let ventricular = core.data().iter().enumerate().any(|(idx, &c)| {
        if !c {
            return false;
        }
        if ventricles.data()[idx] {
            return true;
        }
        let [i, j, k] = grid.coords(idx);
        offsets.iter().any(|o| {
            let (a, b, cc) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
            grid.contains(a, b, cc) && *ventricles.get(a as usize, b as usize, cc as usize)
        })
    });

    let mut functions = Vec::new();
    let mut regions = Vec::new();
    for e in &config.eloquent {
        if merged.anatomy_scheme.region(&e.region).is_none() {
            warn!(region = %e.region, "eloquent region not in anatomy scheme");
            continue;
        }
        let m = merged.anatomy_mask(|r| r.name == e.region);
        if overlap_ml(&m) >= config.v_min_ml {
            if !functions.contains(&e.function) {
                functions.push(e.function.clone());
            }
            regions.push(e.region.clone());
        }
    }
    Involvement {
        cortical,
        deep_wm,
        ventricular,
        eloquent: EloquentInvolvement {
            involved: !regions.is_empty(),
            functions,
            regions,
        },
    }
}

/// Lobe region index for each voxel of the pre-merge anatomy: cortical
/// parcels map to their lobe, white matter to the lobe of the geodesically
/// nearest parcel.
fn lobe_assignment(merged: &MergedSegmentation) -> Vec<Option<usize>> {
    let scheme = &merged.anatomy_scheme;
    let grid = *merged.anatomy.grid();
    let mut lobe_of: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
    for (ri, r) in scheme.regions.iter().enumerate() {
        if r.kind == RegionKind::Lobe {
            for &l in &r.labels {
                lobe_of.entry(l).or_insert(ri);
            }
        }
    }
    let wm = scheme.label_set(|r| r.kind == RegionKind::WhiteMatter);
    let labels = merged.anatomy.data();
    let mut out: Vec<Option<usize>> = labels.iter().map(|l| lobe_of.get(l).copied()).collect();
    let mut queue: VecDeque<usize> = (0..out.len()).filter(|&i| out[i].is_some()).collect();
    let offsets = Connectivity::TwentySix.offsets();
    while let Some(idx) = queue.pop_front() {
        let [i, j, k] = grid.coords(idx);
        for o in &offsets {
            let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
            if !grid.contains(a, b, c) {
                continue;
            }
            let n = grid.index(a as usize, b as usize, c as usize);
            if out[n].is_none() && wm.contains(&labels[n]) {
                out[n] = out[idx];
                queue.push_back(n);
            }
        }
    }
    out
}

/// Anatomical regions holding the tumour core (whole tumour when there is
/// no core): every region above `min_fraction` up to `max_regions`, or the
/// single largest when none is.
pub fn tumor_location(merged: &MergedSegmentation, min_fraction: f64, max_regions: usize) -> Vec<String> {
    let scheme = &merged.anatomy_scheme;
    let mut mask = merged.core_mask();
    if mask.count_true() == 0 {
        mask = merged.whole_tumor_mask();
    }
    let total = mask.count_true();
    if total == 0 {
        return Vec::new();
    }
    let membership = scheme.membership();
    let lobes = lobe_assignment(merged);
    let mut counts = vec![0usize; scheme.regions.len()];
    for (idx, &m) in mask.data().iter().enumerate() {
        if !m {
            continue;
        }
        let mut hit = false;
        if let Some(rs) = membership.get(&merged.anatomy.data()[idx]) {
            for &r in rs {
                if scheme.regions[r].kind.is_location() {
                    counts[r] += 1;
                    hit |= scheme.regions[r].kind == RegionKind::Lobe;
                }
            }
        }
        if !hit {
            if let Some(r) = lobes[idx] {
                counts[r] += 1;
            }
        }
    }
    let mut ranked: Vec<(usize, usize)> = counts
        .into_iter()
        .enumerate()
        .filter(|&(_, c)| c > 0)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(scheme.regions[a.0].name.cmp(&scheme.regions[b.0].name)));
    let above: Vec<String> = ranked
        .iter()
        .filter(|&&(_, c)| c as f64 / total as f64 > min_fraction)
        .take(max_regions)
        .map(|&(r, _)| scheme.regions[r].name.clone())
        .collect();
    if !above.is_empty() {
        above
    } else {
        ranked
            .first()
            .map(|&(r, _)| vec![scheme.regions[r].name.clone()])
            .unwrap_or_default()
    }
}

/// Inputs for one case, all on the same RAS grid.
#[derive(Debug, Clone)]
pub struct CaseInputs {
    pub subject_id: String,
    pub tumor: LabelVolume,
    pub anatomy: Option<LabelVolume>,
    pub midline: Option<Mask>,
    pub age: Option<f64>,
    pub sex: Option<String>,
}

/// Everything computed for one case; `features` is the serialized product.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub features: FeatureSet,
    pub merged: MergedSegmentation,
    pub statistics: TumorStatistics,
    pub ideal_midline: Option<IdealMidline>,
    pub midline: Option<MidlineResult>,
}

pub fn extract_features(
    inputs: &CaseInputs,
    config: &FeatureConfig,
    scheme: &AnatomyScheme,
) -> Result<Extraction, FeatureError> {
    let grid = *inputs.tumor.grid();
    let has_anatomy = inputs.anatomy.is_some();
    let anatomy = inputs.anatomy.clone().unwrap_or_else(|| Volume::filled(grid, 0));
    let midline_mask = inputs.midline.clone().unwrap_or_else(|| Volume::filled(grid, false));
    let merged = merge_segmentations(&anatomy, &inputs.tumor, &midline_mask, scheme, config.tumor_labels)?;
    let stats = tumor_statistics(&merged, config.min_lesion_ml);
    let props = stats.proportions;

    let (quality, thickness) =
        enhancement_features(&merged, props.prop_enhancing, config.q_mild, config.thick_margin_mm);
    let (focality, satellites) =
        match focality_and_satellites(&stats.lesions, &merged, config.min_lesion_ml, config.sat_max_ml) {
            Ok((f, s)) => (Measured::Value(f), s),
            Err(_) => (Measured::Unavailable, false),
        };

    let ideal = match &inputs.midline {
        Some(m) => match ideal_midline(m) {
            Ok(i) => Some(i),
            Err(e) => {
                warn!(subject = %inputs.subject_id, error = %e, "midline unusable");
                None
            }
        },
        None => None,
    };
    let mut mls = None;
    let (mut side, mut max_mls, mut direction, mut level) = (
        Measured::Unavailable,
        Measured::Unavailable,
        Measured::Unavailable,
        Measured::Unavailable,
    );
    let (mut ed_cross, mut et_cross) = (Measured::Unavailable, Measured::Unavailable);
    if let (Some(ideal), Some(m)) = (&ideal, &inputs.midline) {
        let mut r = midline_deviation(m, ideal)?;
        if has_anatomy {
            if let Some(z) = r.slice_of_max {
                let l = mls_level_label(&merged, z);
                r.level_label = Some(l.clone());
                level = Measured::Value(l);
            }
        }
        max_mls = Measured::Value(round_to(r.max_mls_mm, 1));
        direction = r.direction.into();
        side = match side_of_epicenter(&merged, ideal, config.side_fraction) {
            Ok(s) => Measured::Value(s),
            Err(FeatureError::EmptyCore) => Measured::Unavailable,
            Err(e) => return Err(e),
        };
        ed_cross = Measured::Value(crosses_midline(&merged.ed_mask(), ideal, config.crossing_min_ml)?);
        et_cross = Measured::Value(crosses_midline(&merged.et_mask(), ideal, config.crossing_min_ml)?);
        mls = Some(r);
    }

    let (mut cortical, mut deep_wm, mut ventricular, mut eloquent, mut location) = (
        Measured::Unavailable,
        Measured::Unavailable,
        Measured::Unavailable,
        Measured::Unavailable,
        Measured::Unavailable,
    );
    let (mut asym, mut enlarged) = (Measured::Unavailable, Measured::Unavailable);
    if has_anatomy {
        let inv = involvement_flags(&merged, config);
        cortical = Measured::Value(inv.cortical);
        deep_wm = Measured::Value(inv.deep_wm);
        ventricular = Measured::Value(inv.ventricular);
        eloquent = Measured::Value(inv.eloquent);
        let loc = tumor_location(&merged, config.location_min_fraction, config.location_max_regions);
        if !loc.is_empty() {
            location = Measured::Value(loc);
        }
        match ventricle_metrics(&merged, config.atlas_ventricle_ml.unwrap_or(f64::NAN), config.ventricles) {
            Ok(v) => {
                asym = Measured::Value(v.asymmetrical);
                if config.atlas_ventricle_ml.is_some() {
                    enlarged = Measured::Value(v.enlarged);
                }
            }
            Err(AnatomyError::VentriclesMissing) => {
                warn!(subject = %inputs.subject_id, "ventricles missing from anatomy");
            }
            Err(e) => return Err(e.into()),
        }
    }

    let features = FeatureSet {
        subject_id: inputs.subject_id.clone(),
        age: inputs.age.into(),
        sex: inputs.sex.clone().into(),
        total_tumor_volume_ml: round_to(stats.total_volume_ml, 2),
        lesion_sizes_cm: stats
            .lesions
            .lesions
            .iter()
            .map(|l| l.extents_cm.map(|e| round_to(e, 1)))
            .collect(),
        prop_necrosis: round_to(props.prop_necrosis, 4),
        num_lesions: stats.lesions.num_lesions(),
        prop_enhancing: round_to(props.prop_enhancing, 4),
        prop_edema: round_to(props.prop_edema, 4),
        cortical_involvement: cortical,
        tumor_location: location,
        ventricular_invasion: ventricular,
        side_of_epicenter: side,
        enhancement_quality: quality,
        enhancement_thickness: thickness,
        multiple_satellites: satellites,
        multifocal_or_multicentric: focality,
        deep_wm_invasion: deep_wm,
        eloquent_brain: eloquent,
        level_of_max_mls: level,
        max_mls_mm: max_mls,
        mls_direction: direction,
        edema_crosses_midline: ed_cross,
        et_crosses_midline: et_cross,
        asymmetrical_ventricles: asym,
        enlarged_ventricles: enlarged,
        ed_volume_ml: round_to(stats.ed_volume_ml, 2),
        provenance: Provenance {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            anatomy_scheme: scheme.name.clone(),
            config_sha256: config.digest(),
            thresholds: config.clone(),
        },
    };
    Ok(Extraction {
        features,
        merged,
        statistics: stats,
        ideal_midline: ideal,
        midline: mls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Affine, Grid};

    fn grid(n: usize) -> Grid {
        let c = (n / 2) as f64;
        Grid::new([n, n, n], Affine::from_spacing_origin([1.0; 3], [-c, -c, -c]))
    }

    fn merged(anatomy: LabelVolume, tumor: LabelVolume, midline: Mask) -> MergedSegmentation {
        merge_segmentations(&anatomy, &tumor, &midline, &AnatomyScheme::synthseg_dk(), TumorScheme::default())
            .unwrap()
    }

    fn sagittal_midline(g: Grid) -> Mask {
        let mut m = Volume::filled(g, false);
        let c = g.dims[0] / 2;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                m.set(c, j, k, true);
            }
        }
        m
    }

    fn fill_box(v: &mut LabelVolume, lo: [usize; 3], hi: [usize; 3], label: u32) {
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    v.set(i, j, k, label);
                }
            }
        }
    }

    /// Spherical shell of enhancing tumour with wall `w` voxels around a
    /// necrotic centre, radius `r`.
    fn shell(g: Grid, r: f64, w: f64) -> LabelVolume {
        let mut t = Volume::filled(g, 0u32);
        let c = (g.dims[0] / 2) as f64;
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in 0..g.dims[0] {
                    let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2)).sqrt();
                    if d <= r - w {
                        t.set(i, j, k, 1);
                    } else if d <= r {
                        t.set(i, j, k, 3);
                    }
                }
            }
        }
        t
    }

    #[test]
    fn measured_serialization() {
        let v: Measured<bool> = Measured::Value(true);
        assert_eq!(serde_json::to_string(&v).unwrap(), "true");
        let u: Measured<String> = Measured::Unavailable;
        assert_eq!(serde_json::to_string(&u).unwrap(), "\"unavailable\"");
        let back: Measured<String> = serde_json::from_str("\"unavailable\"").unwrap();
        assert_eq!(back, Measured::Unavailable);
        let s: Measured<String> = serde_json::from_str("\"level of slice 3\"").unwrap();
        assert_eq!(s, Measured::Value("level of slice 3".into()));
    }

    #[test]
    fn epicenter_sides() {
        let g = grid(20);
        let ideal = ideal_midline(&sagittal_midline(g)).unwrap();
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [12, 5, 5], [16, 10, 10], 3);
        let m = merged(Volume::filled(g, 0), t, Volume::filled(g, false));
        assert_eq!(side_of_epicenter(&m, &ideal, 0.6).unwrap(), Side::Right);

        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [6, 5, 5], [14, 10, 10], 1);
        let m = merged(Volume::filled(g, 0), t, Volume::filled(g, false));
        // 4 columns left, 1 on the line, 3 right
        assert_eq!(side_of_epicenter(&m, &ideal, 0.6).unwrap(), Side::Bilateral);

        let m = merged(Volume::filled(g, 0), Volume::filled(g, 0), Volume::filled(g, false));
        assert!(matches!(side_of_epicenter(&m, &ideal, 0.6), Err(FeatureError::EmptyCore)));
    }

    #[test]
    fn no_enhancement() {
        let g = grid(10);
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [2, 2, 2], [5, 5, 5], 1);
        let m = merged(Volume::filled(g, 0), t, Volume::filled(g, false));
        assert_eq!(
            enhancement_features(&m, 0.0, 0.05, 3.0),
            (EnhancementQuality::Absent, EnhancementThickness::NotApplicable)
        );
    }

    #[test]
    fn shell_thickness_follows_wall_width() {
        let g = grid(40);
        for (w, expect) in [
            (1.0, EnhancementThickness::Thin),
            (2.0, EnhancementThickness::Thin),
            (4.0, EnhancementThickness::Thick),
            (5.0, EnhancementThickness::Thick),
            (6.0, EnhancementThickness::Thick),
        ] {
            let m = merged(Volume::filled(g, 0), shell(g, 15.0, w), Volume::filled(g, false));
            let (q, t) = enhancement_features(&m, 0.28, 0.05, 3.0);
            assert_eq!(q, EnhancementQuality::Marked);
            assert_eq!(t, expect, "wall {w}");
        }
    }

    #[test]
    fn mild_enhancement() {
        let g = grid(30);
        let m = merged(Volume::filled(g, 0), shell(g, 10.0, 1.0), Volume::filled(g, false));
        assert_eq!(enhancement_features(&m, 0.01, 0.05, 3.0).0, EnhancementQuality::Mild);
    }

    fn focality_of(t: LabelVolume) -> (Focality, bool) {
        let g = *t.grid();
        let m = merged(Volume::filled(g, 0), t, Volume::filled(g, false));
        let st = tumor_statistics(&m, 0.05);
        focality_and_satellites(&st.lesions, &m, 0.05, 1.0).unwrap()
    }

    #[test]
    fn focality_rules() {
        let g = grid(40);
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [5, 5, 5], [15, 15, 15], 3);
        assert_eq!(focality_of(t.clone()), (Focality::Solitary, false));

        // second core bridged by edema
        let mut bridged = t.clone();
        fill_box(&mut bridged, [15, 5, 5], [20, 15, 15], 2);
        fill_box(&mut bridged, [20, 5, 5], [30, 15, 15], 1);
        assert_eq!(focality_of(bridged).0, Focality::Multifocal);

        // second core far away
        let mut apart = t.clone();
        fill_box(&mut apart, [25, 25, 25], [35, 35, 35], 1);
        assert_eq!(focality_of(apart).0, Focality::Multicentric);

        // remote 0.3 mL ET nodule
        let mut sat = t.clone();
        fill_box(&mut sat, [30, 30, 30], [33, 40, 40], 3);
        let (f, s) = focality_of(sat);
        assert_eq!(f, Focality::Multicentric);
        assert!(s);
    }

    #[test]
    fn empty_core_focality_is_error() {
        let g = grid(10);
        let m = merged(Volume::filled(g, 0), Volume::filled(g, 0), Volume::filled(g, false));
        let st = tumor_statistics(&m, 0.05);
        assert!(focality_and_satellites(&st.lesions, &m, 0.05, 1.0).is_err());
    }

    #[test]
    fn involvement_far_from_everything() {
        let g = grid(30);
        let mut a = Volume::filled(g, 0u32);
        fill_box(&mut a, [0, 0, 0], [5, 5, 5], 4);
        fill_box(&mut a, [25, 25, 25], [30, 30, 30], 3);
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [12, 12, 12], [18, 18, 18], 3);
        let m = merged(a, t, Volume::filled(g, false));
        let inv = involvement_flags(&m, &FeatureConfig::default());
        assert!(!inv.cortical && !inv.deep_wm && !inv.ventricular && !inv.eloquent.involved);
    }

    #[test]
    fn involvement_positive_cases() {
        let g = grid(30);
        let mut a = Volume::filled(g, 0u32);
        fill_box(&mut a, [0, 0, 0], [10, 30, 30], 41); // right WM
        fill_box(&mut a, [10, 0, 0], [12, 30, 30], 43); // right lateral ventricle
        fill_box(&mut a, [20, 0, 0], [30, 30, 30], 2021); // right pericalcarine
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [12, 10, 10], [14, 20, 20], 3); // face-adjacent ET
        fill_box(&mut t, [5, 10, 10], [10, 20, 20], 2);
        fill_box(&mut t, [20, 10, 10], [25, 20, 20], 2);
        let m = merged(a, t, Volume::filled(g, false));
        let inv = involvement_flags(&m, &FeatureConfig::default());
        assert!(inv.ventricular);
        assert!(inv.deep_wm);
        assert!(inv.cortical);
        assert!(inv.eloquent.involved);
        assert_eq!(inv.eloquent.functions, vec!["vision".to_string()]);
        assert_eq!(inv.eloquent.regions, vec!["right pericalcarine cortex".to_string()]);
    }

    #[test]
    fn location_uses_nearest_lobe_for_white_matter() {
        let g = grid(30);
        let mut a = Volume::filled(g, 0u32);
        fill_box(&mut a, [0, 0, 0], [30, 30, 30], 41);
        fill_box(&mut a, [28, 0, 0], [30, 30, 30], 2030); // right superior temporal
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [20, 10, 10], [26, 16, 16], 3);
        let m = merged(a, t, Volume::filled(g, false));
        assert_eq!(tumor_location(&m, 0.15, 3), vec!["right temporal lobe".to_string()]);
    }

    #[test]
    fn extraction_without_anatomy_or_midline() {
        let g = grid(20);
        let mut t = Volume::filled(g, 0u32);
        fill_box(&mut t, [5, 5, 5], [10, 10, 10], 1);
        let inputs = CaseInputs {
            subject_id: "s1".into(),
            tumor: t,
            anatomy: None,
            midline: None,
            age: None,
            sex: None,
        };
        let x = extract_features(&inputs, &FeatureConfig::default(), &AnatomyScheme::synthseg_dk()).unwrap();
        let f = &x.features;
        assert_eq!(f.enhancement_quality, EnhancementQuality::Absent);
        assert_eq!(f.enhancement_thickness, EnhancementThickness::NotApplicable);
        assert_eq!(f.max_mls_mm, Measured::Unavailable);
        assert_eq!(f.cortical_involvement, Measured::Unavailable);
        assert_eq!(f.num_lesions, 1);
        assert_eq!(f.total_tumor_volume_ml, 0.13);
        let json = f.to_json_pretty();
        let back: FeatureSet = serde_json::from_str(&json).unwrap();
        assert_eq!(&back, f);
    }

    #[test]
    fn descriptor_keys_are_feature_fields() {
        let g = grid(10);
        let inputs = CaseInputs {
            subject_id: "s".into(),
            tumor: Volume::filled(g, 0),
            anatomy: None,
            midline: None,
            age: Some(61.0),
            sex: Some("F".into()),
        };
        let x = extract_features(&inputs, &FeatureConfig::default(), &AnatomyScheme::synthseg_dk()).unwrap();
        let v = serde_json::to_value(&x.features).unwrap();
        for d in DESCRIPTORS {
            for k in d.keys {
                assert!(v.get(k).is_some(), "missing {k}");
            }
        }
        assert_eq!(DESCRIPTORS.iter().filter(|d| d.survival_predictor).count(), 11);
    }

    #[test]
    fn config_toml_roundtrip_and_partial() {
        let c = FeatureConfig::default();
        let back: FeatureConfig = toml::from_str(&toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: FeatureConfig = toml::from_str("q_mild = 0.1\natlas_ventricle_ml = 25.0").unwrap();
        assert_eq!(partial.q_mild, 0.1);
        assert_eq!(partial.sat_max_ml, 1.0);
        assert!(toml::from_str::<FeatureConfig>("bogus = 1").is_err());
    }
}
