//! Merged anatomy/tumour/midline segmentations and their volumetric,
//! lesion and overlap statistics.

mod scheme;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::morph::{connected_components_3d, Components, Connectivity};
pub use scheme::{AnatomyScheme, Hemisphere, Region, RegionKind, TumorScheme};

use crate::volume::{LabelVolume, Mask, Volume, VolumeError};

/// Merged labels at or above this value belong to the tumour namespace.
pub const TUMOR_NAMESPACE: u32 = 100_000;
/// Merged label of the midline annotation.
pub const MIDLINE_LABEL: u32 = 200_000;

#[derive(Debug, Error)]
pub enum AnatomyError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("tumour label {0} is not part of the tumour scheme")]
    UnknownTumorLabel(u32),
    #[error("anatomy label {0} collides with the tumour/midline namespaces")]
    AnatomyLabelTooLarge(u32),
    #[error("ventricles missing from anatomy")]
    VentriclesMissing,
}

/// Where a merged label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Background,
    Anatomy(u32),
    Tumor(u32),
    Midline,
}

pub fn provenance(merged_label: u32) -> Provenance {
    match merged_label {
        0 => Provenance::Background,
        MIDLINE_LABEL => Provenance::Midline,
        l if l >= TUMOR_NAMESPACE => Provenance::Tumor(l - TUMOR_NAMESPACE),
        l => Provenance::Anatomy(l),
    }
}

/// One label map combining anatomy, tumour and midline, plus the
/// pre-merge inputs it was built from.
///
/// Priority per voxel: midline > tumour > anatomy > background.
#[derive(Debug, Clone)]
pub struct MergedSegmentation {
    pub labels: LabelVolume,
    pub anatomy: LabelVolume,
    pub tumor: LabelVolume,
    pub midline: Mask,
    pub anatomy_scheme: AnatomyScheme,
    pub tumor_scheme: TumorScheme,
}

pub fn merge_segmentations(
    anatomy: &LabelVolume,
    tumor: &LabelVolume,
    midline: &Mask,
    anatomy_scheme: &AnatomyScheme,
    tumor_scheme: TumorScheme,
) -> Result<MergedSegmentation, AnatomyError> {
    anatomy.grid().ensure_matches(tumor.grid(), "anatomy vs tumour")?;
    anatomy.grid().ensure_matches(midline.grid(), "anatomy vs midline")?;
    if let Some(&bad) = tumor.data().iter().find(|&&l| !tumor_scheme.is_known(l)) {
        return Err(AnatomyError::UnknownTumorLabel(bad));
    }
    if let Some(&bad) = anatomy.data().iter().find(|&&l| l >= TUMOR_NAMESPACE) {
        return Err(AnatomyError::AnatomyLabelTooLarge(bad));
    }
    let data: Vec<u32> = anatomy
        .data()
        .iter()
        .zip(tumor.data())
        .zip(midline.data())
        .map(|((&a, &t), &m)| {
            if m {
                MIDLINE_LABEL
            } else if t != 0 {
                TUMOR_NAMESPACE + t
            } else {
                a
            }
        })
        .collect();
    Ok(MergedSegmentation {
        labels: Volume::from_vec(*anatomy.grid(), data)?,
        anatomy: anatomy.clone(),
        tumor: tumor.clone(),
        midline: midline.clone(),
        anatomy_scheme: anatomy_scheme.clone(),
        tumor_scheme,
    })
}

impl MergedSegmentation {
    pub fn voxel_ml(&self) -> f64 {
        self.labels.grid().voxel_ml()
    }

    pub fn ncr_mask(&self) -> Mask {
        let s = self.tumor_scheme;
        self.tumor.mask_where(|l| l != 0 && l == s.ncr)
    }

    pub fn ed_mask(&self) -> Mask {
        let s = self.tumor_scheme;
        self.tumor.mask_where(|l| l != 0 && l == s.ed)
    }

    pub fn et_mask(&self) -> Mask {
        let s = self.tumor_scheme;
        self.tumor.mask_where(|l| l != 0 && l == s.et)
    }

    /// Necrosis plus enhancing tumour.
    pub fn core_mask(&self) -> Mask {
        let s = self.tumor_scheme;
        self.tumor.mask_where(|l| s.is_core(l))
    }

    pub fn whole_tumor_mask(&self) -> Mask {
        let s = self.tumor_scheme;
        self.tumor.mask_where(|l| s.is_tumor(l))
    }

    /// Voxels of the pre-merge anatomy that fall in any region accepted by `pred`.
    pub fn anatomy_mask(&self, pred: impl Fn(&Region) -> bool) -> Mask {
        let set = self.anatomy_scheme.label_set(pred);
        self.anatomy.mask_where(|l| set.contains(&l))
    }

    /// Same as [`anatomy_mask`](Self::anatomy_mask) but on the merged labels,
    /// i.e. only where tumour and midline did not take precedence.
    pub fn visible_anatomy_mask(&self, pred: impl Fn(&Region) -> bool) -> Mask {
        let set = self.anatomy_scheme.label_set(pred);
        self.labels.mask_where(|l| l < TUMOR_NAMESPACE && set.contains(&l))
    }
}

/// Sub-region fractions of the whole tumour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionProportions {
    pub prop_necrosis: f64,
    pub prop_enhancing: f64,
    pub prop_edema: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    /// Core (necrosis + enhancing) volume.
    pub volume_ml: f64,
    /// Bounding-box extents of core plus contiguous edema: [AP, TV, CC] in cm.
    pub extents_cm: [f64; 3],
    /// Core centroid in RAS mm.
    pub centroid_ras: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct LesionStats {
    /// Ordered by descending core volume; index 0 is the dominant lesion.
    pub lesions: Vec<Lesion>,
    /// Lesion id (1-based, matching `lesions`) per voxel for kept core voxels.
    pub lesion_map: LabelVolume,
    /// Core volume in components below the size threshold.
    pub discarded_core_ml: f64,
}

impl LesionStats {
    pub fn num_lesions(&self) -> usize {
        self.lesions.len()
    }

    pub fn dominant_lesion(&self) -> Option<usize> {
        (!self.lesions.is_empty()).then_some(0)
    }
}

#[derive(Debug, Clone)]
pub struct TumorStatistics {
    pub lesions: LesionStats,
    pub proportions: RegionProportions,
    pub total_volume_ml: f64,
    pub core_volume_ml: f64,
    pub ncr_volume_ml: f64,
    pub ed_volume_ml: f64,
    pub et_volume_ml: f64,
}

/// Tumour volumes, sub-region proportions and lesion inventory.
///
/// Lesions are 26-connected components of the core at least
/// `min_lesion_ml` in size. Each edema voxel contiguous with the tumour is
/// assigned to the geodesically nearest lesion when computing extents.
/// Statistics use the pre-merge tumour labels, so midline voxels do not
/// hide tumour.
pub fn tumor_statistics(merged: &MergedSegmentation, min_lesion_ml: f64) -> TumorStatistics {
    let grid = *merged.tumor.grid();
    let vml = grid.voxel_ml();
    let s = merged.tumor_scheme;
    let (mut n_ncr, mut n_ed, mut n_et) = (0usize, 0usize, 0usize);
    for &l in merged.tumor.data() {
        if l == 0 {
            continue;
        }
        if l == s.ncr {
            n_ncr += 1;
        } else if l == s.ed {
            n_ed += 1;
        } else if l == s.et {
            n_et += 1;
        }
    }
    let whole = n_ncr + n_ed + n_et;
    let proportions = if whole == 0 {
        RegionProportions {
            prop_necrosis: 0.0,
            prop_enhancing: 0.0,
            prop_edema: 0.0,
        }
    } else {
        let w = whole as f64;
        RegionProportions {
            prop_necrosis: n_ncr as f64 / w,
            prop_enhancing: n_et as f64 / w,
            prop_edema: n_ed as f64 / w,
        }
    };

    let core = merged.core_mask();
    let comps = connected_components_3d(&core, Connectivity::TwentySix);
    let min_voxels = comps
        .sizes
        .iter()
        .take_while(|&&n| n as f64 * vml >= min_lesion_ml)
        .count();
    let kept = min_voxels;
    let discarded: usize = comps.sizes[kept..].iter().sum();
    let lesion_map = comps
        .labels
        .map(|&c| if c >= 1 && (c as usize) <= kept { c } else { 0 });

    // Multi-source BFS from kept lesion cores through edema.
    let mut owner: Vec<u32> = lesion_map.data().to_vec();
    let mut queue: VecDeque<usize> = (0..grid.len()).filter(|&i| owner[i] != 0).collect();
    let offsets = Connectivity::TwentySix.offsets();
    let ed = s.ed;
    while let Some(idx) = queue.pop_front() {
        let [i, j, k] = grid.coords(idx);
        for o in &offsets {
            let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
            if !grid.contains(a, b, c) {
                continue;
            }
            let n = grid.index(a as usize, b as usize, c as usize);
            if owner[n] == 0 && merged.tumor.data()[n] == ed && ed != 0 {
                owner[n] = owner[idx];
                queue.push_back(n);
            }
        }
    }

    let spacing = grid.spacing();
    let mut lo = vec![[usize::MAX; 3]; kept];
    let mut hi = vec![[0usize; 3]; kept];
    let mut csum = vec![[0.0f64; 3]; kept];
    for (idx, &o) in owner.iter().enumerate() {
        if o == 0 {
            continue;
        }
        let li = (o - 1) as usize;
        let c = grid.coords(idx);
        for a in 0..3 {
            lo[li][a] = lo[li][a].min(c[a]);
            hi[li][a] = hi[li][a].max(c[a]);
        }
        if lesion_map.data()[idx] != 0 {
            let w = grid.world(idx);
            for a in 0..3 {
                csum[li][a] += w[a];
            }
        }
    }
    let lesions = (0..kept)
        .map(|li| {
            let span = |a: usize| (hi[li][a] - lo[li][a] + 1) as f64 * spacing[a] / 10.0;
            let n = comps.sizes[li] as f64;
            Lesion {
                volume_ml: comps.sizes[li] as f64 * vml,
                extents_cm: [span(1), span(0), span(2)],
                centroid_ras: [csum[li][0] / n, csum[li][1] / n, csum[li][2] / n],
            }
        })
        .collect();

    TumorStatistics {
        lesions: LesionStats {
            lesions,
            lesion_map,
            discarded_core_ml: discarded as f64 * vml,
        },
        proportions,
        total_volume_ml: whole as f64 * vml,
        core_volume_ml: (n_ncr + n_et) as f64 * vml,
        ncr_volume_ml: n_ncr as f64 * vml,
        ed_volume_ml: n_ed as f64 * vml,
        et_volume_ml: n_et as f64 * vml,
    }
}

/// Fraction of `mask` falling in each anatomy region (pre-merge labels).
/// Every region of the scheme appears; an empty mask gives an empty map.
pub fn region_overlap(merged: &MergedSegmentation, mask: &Mask) -> BTreeMap<String, f64> {
    let total = mask.count_true();
    if total == 0 {
        return BTreeMap::new();
    }
    let membership = merged.anatomy_scheme.membership();
    let mut counts = vec![0usize; merged.anatomy_scheme.regions.len()];
    for (&m, &a) in mask.data().iter().zip(merged.anatomy.data()) {
        if !m || a == 0 {
            continue;
        }
        if let Some(rs) = membership.get(&a) {
            for &r in rs {
                counts[r] += 1;
            }
        }
    }
    merged
        .anatomy_scheme
        .regions
        .iter()
        .zip(counts)
        .map(|(r, c)| (r.name.clone(), c as f64 / total as f64))
        .collect()
}

/// Fraction of the whole tumour inside each anatomy region.
pub fn tumor_roi_overlap(merged: &MergedSegmentation) -> BTreeMap<String, f64> {
    region_overlap(merged, &merged.whole_tumor_mask())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VentricleThresholds {
    /// Larger/smaller lateral ventricle volume ratio above which the
    /// ventricles are called asymmetrical.
    pub asymmetry_ratio: f64,
    /// Subject/atlas ventricular volume ratio above which they are enlarged.
    pub enlargement_ratio: f64,
}

impl Default for VentricleThresholds {
    fn default() -> Self {
        VentricleThresholds {
            asymmetry_ratio: 1.5,
            enlargement_ratio: 1.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VentricleMetrics {
    pub left_lateral_ml: f64,
    pub right_lateral_ml: f64,
    pub total_ml: f64,
    /// `f64::INFINITY` when one lateral ventricle is empty.
    pub asymmetry_ratio: f64,
    pub asymmetrical: bool,
    pub enlargement_ratio: f64,
    pub enlarged: bool,
}

/// Ventricular asymmetry and enlargement from the visible (post-merge)
/// ventricle labels. Total volume covers lateral, third and fourth
/// ventricles.
pub fn ventricle_metrics(
    merged: &MergedSegmentation,
    atlas_reference_ml: f64,
    thresholds: VentricleThresholds,
) -> Result<VentricleMetrics, AnatomyError> {
    let vml = merged.voxel_ml();
    let left = merged
        .visible_anatomy_mask(|r| {
            r.kind == RegionKind::LateralVentricle && r.side == Some(Hemisphere::Left)
        })
        .count_true() as f64
        * vml;
    let right = merged
        .visible_anatomy_mask(|r| {
            r.kind == RegionKind::LateralVentricle && r.side == Some(Hemisphere::Right)
        })
        .count_true() as f64
        * vml;
    if left == 0.0 && right == 0.0 {
        return Err(AnatomyError::VentriclesMissing);
    }
    let total = merged
        .visible_anatomy_mask(|r| r.kind.is_ventricle())
        .count_true() as f64
        * vml;
    let (big, small) = if left >= right { (left, right) } else { (right, left) };
    let asymmetry_ratio = if small == 0.0 { f64::INFINITY } else { big / small };
    let enlargement_ratio = total / atlas_reference_ml;
    Ok(VentricleMetrics {
        left_lateral_ml: left,
        right_lateral_ml: right,
        total_ml: total,
        asymmetry_ratio,
        asymmetrical: asymmetry_ratio > thresholds.asymmetry_ratio,
        enlargement_ratio,
        enlarged: enlargement_ratio > thresholds.enlargement_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid;

    fn grid(n: usize) -> Grid {
        Grid::with_spacing([n, n, n], [1.0; 3])
    }

    fn merged_from(anatomy: LabelVolume, tumor: LabelVolume) -> MergedSegmentation {
        let midline = Volume::filled(*anatomy.grid(), false);
        merge_segmentations(&anatomy, &tumor, &midline, &AnatomyScheme::synthseg_dk(), TumorScheme::default())
            .unwrap()
    }

    #[test]
    fn empty_tumor_and_midline_keep_anatomy() {
        let g = grid(6);
        let anatomy = Volume::from_vec(g, (0..216u32).map(|v| v % 5).collect()).unwrap();
        let m = merged_from(anatomy.clone(), Volume::filled(g, 0));
        assert_eq!(m.labels, anatomy);
    }

    #[test]
    fn tumor_wins_over_cortex_and_midline_wins_over_tumor() {
        let g = grid(3);
        let anatomy = Volume::filled(g, 3u32);
        let mut tumor = Volume::filled(g, 0u32);
        tumor.set(0, 0, 0, 3);
        tumor.set(1, 1, 1, 3);
        let mut midline = Volume::filled(g, false);
        midline.set(1, 1, 1, true);
        let m = merge_segmentations(&anatomy, &tumor, &midline, &AnatomyScheme::synthseg_dk(), TumorScheme::default())
            .unwrap();
        assert_eq!(*m.labels.get(0, 0, 0), TUMOR_NAMESPACE + 3);
        assert_eq!(provenance(*m.labels.get(0, 0, 0)), Provenance::Tumor(3));
        assert_eq!(provenance(*m.labels.get(1, 1, 1)), Provenance::Midline);
        assert_eq!(provenance(*m.labels.get(2, 2, 2)), Provenance::Anatomy(3));
    }

    #[test]
    fn merge_rejects_grid_mismatch_and_unknown_labels() {
        let a = Volume::filled(grid(3), 0u32);
        let t = Volume::filled(grid(4), 0u32);
        let mid = Volume::filled(grid(3), false);
        let s = AnatomyScheme::synthseg_dk();
        assert!(merge_segmentations(&a, &t, &mid, &s, TumorScheme::default()).is_err());
        let t = Volume::filled(grid(3), 4u32);
        assert!(matches!(
            merge_segmentations(&a, &t, &mid, &s, TumorScheme::default()),
            Err(AnatomyError::UnknownTumorLabel(4))
        ));
    }

    #[test]
    fn cube_of_enhancing_tumor() {
        let g = grid(20);
        let mut tumor = Volume::filled(g, 0u32);
        for k in 5..15 {
            for j in 5..15 {
                for i in 5..15 {
                    tumor.set(i, j, k, 3);
                }
            }
        }
        let m = merged_from(Volume::filled(g, 0), tumor);
        let st = tumor_statistics(&m, 0.05);
        assert!((st.total_volume_ml - 1.0).abs() < 1e-12);
        assert_eq!(st.proportions.prop_enhancing, 1.0);
        assert_eq!(st.lesions.num_lesions(), 1);
        for e in st.lesions.lesions[0].extents_cm {
            assert!((e - 1.0).abs() < 1e-12);
        }
        assert_eq!(st.lesions.lesions[0].centroid_ras, [9.5, 9.5, 9.5]);
    }

    #[test]
    fn extents_follow_ap_tv_cc_order() {
        let g = Grid::with_spacing([30, 30, 30], [1.0, 1.0, 2.0]);
        let mut tumor = Volume::filled(g, 0u32);
        // x span 4, y span 6, z span 3 slices of 2 mm
        for k in 0..3 {
            for j in 0..6 {
                for i in 0..4 {
                    tumor.set(10 + i, 10 + j, 10 + k, 1);
                }
            }
        }
        // contiguous edema extends y by 4 voxels
        for j in 16..20 {
            tumor.set(10, j, 10, 2);
        }
        let m = merged_from(Volume::filled(g, 0), tumor);
        let st = tumor_statistics(&m, 0.0);
        let e = st.lesions.lesions[0].extents_cm;
        assert!((e[0] - 1.0).abs() < 1e-12, "AP {e:?}");
        assert!((e[1] - 0.4).abs() < 1e-12, "TV {e:?}");
        assert!((e[2] - 0.6).abs() < 1e-12, "CC {e:?}");
    }

    #[test]
    fn speckle_is_not_a_lesion() {
        let g = grid(20);
        let mut tumor = Volume::filled(g, 0u32);
        for k in 0..5 {
            for j in 0..5 {
                for i in 0..5 {
                    tumor.set(i, j, k, 1);
                }
            }
        }
        tumor.set(15, 15, 15, 3);
        let m = merged_from(Volume::filled(g, 0), tumor);
        let st = tumor_statistics(&m, 0.05);
        assert_eq!(st.lesions.num_lesions(), 1);
        let sum: f64 = st.lesions.lesions.iter().map(|l| l.volume_ml).sum();
        assert!((sum + st.lesions.discarded_core_ml - st.core_volume_ml).abs() < 1e-9);
    }

    #[test]
    fn overlap_single_region() {
        let g = grid(10);
        let mut anatomy = Volume::filled(g, 0u32);
        let mut tumor = Volume::filled(g, 0u32);
        for i in 0..5 {
            anatomy.set(i, 0, 0, 2030); // right superior temporal gyrus
            tumor.set(i, 0, 0, 2);
        }
        let m = merged_from(anatomy, tumor);
        let ov = tumor_roi_overlap(&m);
        assert_eq!(ov["right temporal lobe"], 1.0);
        assert_eq!(ov["right superior temporal gyrus"], 1.0);
        assert_eq!(ov["left frontal lobe"], 0.0);
    }

    #[test]
    fn overlap_empty_tumor() {
        let g = grid(4);
        let m = merged_from(Volume::filled(g, 3), Volume::filled(g, 0));
        assert!(tumor_roi_overlap(&m).is_empty());
    }

    fn ventricle_case(left: usize, right: usize) -> MergedSegmentation {
        let g = grid(10);
        let mut anatomy = Volume::filled(g, 0u32);
        for i in 0..left {
            anatomy.data_mut()[i] = 4;
        }
        for i in 0..right {
            anatomy.data_mut()[500 + i] = 43;
        }
        merged_from(anatomy, Volume::filled(g, 0))
    }

    #[test]
    fn symmetric_ventricles() {
        let v = ventricle_metrics(&ventricle_case(100, 100), 1.0, Default::default()).unwrap();
        assert_eq!(v.asymmetry_ratio, 1.0);
        assert!(!v.asymmetrical);
    }

    #[test]
    fn asymmetric_and_enlarged() {
        let m = ventricle_case(200, 100);
        let v = ventricle_metrics(&m, 0.3 / 1.5, Default::default()).unwrap();
        assert_eq!(v.asymmetry_ratio, 2.0);
        assert!(v.asymmetrical);
        assert!((v.enlargement_ratio - 1.5).abs() < 1e-12);
        assert!(v.enlarged);
    }

    #[test]
    fn one_sided_ventricle_ratio_is_infinite() {
        let v = ventricle_metrics(&ventricle_case(50, 0), 1.0, Default::default()).unwrap();
        assert!(v.asymmetry_ratio.is_infinite());
        assert!(v.asymmetrical);
    }

    #[test]
    fn missing_ventricles() {
        assert!(matches!(
            ventricle_metrics(&ventricle_case(0, 0), 1.0, Default::default()),
            Err(AnatomyError::VentriclesMissing)
        ));
    }
}
