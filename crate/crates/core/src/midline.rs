//! Ideal midline construction, 3D midline shift and midline-crossing tests.
//!
//! All geometry is in RAS world millimetres. A positive signed deviation
//! means the voxel lies to the right (+x) of the ideal line, negative to
//! the left.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::anatomy::{Hemisphere, MergedSegmentation, RegionKind};
use crate::volume::{apply_displacement_field, DisplacementField, Grid, Mask, VolumeError};

#[derive(Debug, Error)]
pub enum MidlineError {
    #[error("midline mask is empty")]
    EmptyMidline,
    #[error("midline mask has no axial slice with at least two voxels")]
    NoSegments,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Voxels closer than this to the ideal line count as lying on it.
const ON_LINE_MM: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub anterior: [f64; 3],
    pub posterior: [f64; 3],
}

impl Segment {
    /// In-plane (x, y) signed distance from `p` to the line through the
    /// endpoints; the sign is that of the x component of the offset.
    pub fn signed_distance(&self, p: [f64; 3]) -> f64 {
        let (ax, ay) = (self.anterior[0], self.anterior[1]);
        let (dx, dy) = (self.posterior[0] - ax, self.posterior[1] - ay);
        let len2 = dx * dx + dy * dy;
        let (px, py) = (p[0] - ax, p[1] - ay);
        let t = (px * dx + py * dy) / len2;
        let (ox, oy) = (px - t * dx, py - t * dy);
        let dist = (ox * ox + oy * oy).sqrt();
        if ox != 0.0 {
            dist.copysign(ox)
        } else {
            // Line parallel to x: fall back to the side of the A->P direction.
            let cross = dx * py - dy * px;
            if cross < 0.0 {
                dist
            } else {
                -dist
            }
        }
    }
}

/// Per axial slice, the line joining the anterior- and posterior-most
/// midline voxels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdealMidline {
    pub grid: Grid,
    pub segments: Vec<Option<Segment>>,
}

impl IdealMidline {
    pub fn segment(&self, z: usize) -> Option<&Segment> {
        self.segments.get(z).and_then(|s| s.as_ref())
    }

    /// Segment of slice `z`, or of the nearest populated slice (lower z on ties).
    pub fn nearest_segment(&self, z: usize) -> Option<&Segment> {
        let n = self.segments.len();
        for d in 0..n {
            if d <= z {
                if let Some(s) = self.segment(z - d) {
                    return Some(s);
                }
            }
            if let Some(s) = self.segment(z + d) {
                return Some(s);
            }
        }
        None
    }

    pub fn populated_slices(&self) -> usize {
        self.segments.iter().filter(|s| s.is_some()).count()
    }
}

fn median_x_pick(mut cands: Vec<[f64; 3]>) -> [f64; 3] {
    cands.sort_by(|a, b| a[0].total_cmp(&b[0]));
    cands[(cands.len() - 1) / 2]
}

pub fn ideal_midline(midline: &Mask) -> Result<IdealMidline, MidlineError> {
    let grid = *midline.grid();
    let [nx, ny, nz] = grid.dims;
    if midline.count_true() == 0 {
        return Err(MidlineError::EmptyMidline);
    }
    let mut segments = Vec::with_capacity(nz);
    for k in 0..nz {
        let mut pts = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if *midline.get(i, j, k) {
                    pts.push(grid.world(grid.index(i, j, k)));
                }
            }
        }
        if pts.len() < 2 {
            segments.push(None);
            continue;
        }
        let ymax = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
        let ymin = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
        if ymax - ymin < 1e-9 {
            // all voxels in one coronal row: no anterior/posterior direction
            segments.push(None);
            continue;
        }
        let pick = |y: f64| {
            median_x_pick(pts.iter().copied().filter(|p| (p[1] - y).abs() < 1e-9).collect())
        };
        segments.push(Some(Segment {
            anterior: pick(ymax),
            posterior: pick(ymin),
        }));
    }
    let ideal = IdealMidline { grid, segments };
    if ideal.populated_slices() == 0 {
        return Err(MidlineError::NoSegments);
    }
    Ok(ideal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationSample {
    pub voxel: [usize; 3],
    pub signed_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MidlineResult {
    /// Maximum absolute deviation per axial slice; `None` where the slice
    /// has no midline voxels or no ideal segment.
    pub per_slice_max_mm: Vec<Option<f64>>,
    pub max_mls_mm: f64,
    /// Defined iff `max_mls_mm > 0`.
    pub direction: Option<Hemisphere>,
    pub slice_of_max: Option<usize>,
    pub level_label: Option<String>,
    /// Slices holding midline voxels but lacking an ideal segment.
    pub skipped_slices: usize,
    pub samples: Vec<DeviationSample>,
}

pub fn midline_deviation(midline: &Mask, ideal: &IdealMidline) -> Result<MidlineResult, MidlineError> {
    let grid = *midline.grid();
    grid.ensure_matches(&ideal.grid, "midline vs ideal midline")?;
    let [nx, ny, nz] = grid.dims;
    let mut per_slice = vec![None; nz];
    let mut samples = Vec::new();
    let mut skipped = 0;
    // (|dev|, signed, z)
    let mut best: Option<(f64, f64, usize)> = None;
    for k in 0..nz {
        let mut slice_max: Option<f64> = None;
        let mut has_voxels = false;
        for j in 0..ny {
            for i in 0..nx {
                if !*midline.get(i, j, k) {
                    continue;
                }
                has_voxels = true;
                let Some(seg) = ideal.segment(k) else { continue };
                let d = seg.signed_distance(grid.world(grid.index(i, j, k)));
                samples.push(DeviationSample {
                    voxel: [i, j, k],
                    signed_mm: d,
                });
                slice_max = Some(slice_max.map_or(d.abs(), |m: f64| m.max(d.abs())));
                if best.is_none_or(|b| d.abs() > b.0) {
                    best = Some((d.abs(), d, k));
                }
            }
        }
        if has_voxels && ideal.segment(k).is_none() {
            skipped += 1;
        }
        per_slice[k] = slice_max;
    }
    if skipped > 0 {
        warn!(skipped, "midline slices without an ideal segment were skipped");
    }
    let (max_mls_mm, direction, slice_of_max) = match best {
        Some((m, s, z)) if m > 0.0 => (
            m,
            Some(if s < 0.0 { Hemisphere::Left } else { Hemisphere::Right }),
            Some(z),
        ),
        Some((_, _, z)) => (0.0, None, Some(z)),
        None => (0.0, None, None),
    };
    Ok(MidlineResult {
        per_slice_max_mm: per_slice,
        max_mls_mm,
        direction,
        slice_of_max,
        level_label: None,
        skipped_slices: skipped,
        samples,
    })
}

/// Voxel counts of `region` left of, right of and on the ideal midline.
/// Slices without a segment use the nearest populated slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SideCounts {
    pub left: usize,
    pub right: usize,
    pub on_line: usize,
}

pub fn side_counts(region: &Mask, ideal: &IdealMidline) -> Result<SideCounts, MidlineError> {
    let grid = *region.grid();
    grid.ensure_matches(&ideal.grid, "region vs ideal midline")?;
    let mut c = SideCounts::default();
    for (idx, &m) in region.data().iter().enumerate() {
        if !m {
            continue;
        }
        let z = grid.coords(idx)[2];
        let Some(seg) = ideal.nearest_segment(z) else {
            return Err(MidlineError::NoSegments);
        };
        let d = seg.signed_distance(grid.world(idx));
        if d > ON_LINE_MM {
            c.right += 1;
        } else if d < -ON_LINE_MM {
            c.left += 1;
        } else {
            c.on_line += 1;
        }
    }
    Ok(c)
}

/// True iff the region volume strictly on each side of the ideal midline
/// exceeds `min_ml`.
pub fn crosses_midline(region: &Mask, ideal: &IdealMidline, min_ml: f64) -> Result<bool, MidlineError> {
    let c = side_counts(region, ideal)?;
    let v = region.grid().voxel_ml();
    Ok(c.left as f64 * v > min_ml && c.right as f64 * v > min_ml)
}

pub fn mls_level_label(merged: &MergedSegmentation, z: usize) -> String {
    let [nx, ny, nz] = merged.anatomy.dims();
    if z < nz {
        let scheme = &merged.anatomy_scheme;
        let lateral = scheme.label_set(|r| r.kind == RegionKind::LateralVentricle);
        let third = scheme.label_set(|r| r.kind == RegionKind::ThirdVentricle);
        let start = nx * ny * z;
        let slice = &merged.anatomy.data()[start..start + nx * ny];
        if slice.iter().any(|l| lateral.contains(l)) {
            return "level of the lateral ventricles".into();
        }
        if slice.iter().any(|l| third.contains(l)) {
            return "level of the third ventricle".into();
        }
    }
    format!("level of slice {z}")
}

/// Subject-space midline, given directly or as an atlas annotation plus
/// a displacement field into the subject grid.
#[derive(Debug, Clone)]
pub enum MidlineSource {
    Subject(Mask),
    Atlas { mask: Mask, field: DisplacementField },
}

pub fn subject_midline(source: &MidlineSource, target: &Grid) -> Result<Mask, MidlineError> {
    match source {
        MidlineSource::Subject(m) => {
            m.grid().ensure_matches(target, "midline vs subject grid")?;
            Ok(m.clone())
        }
        MidlineSource::Atlas { mask, field } => {
            let warped = apply_displacement_field(&mask.to_labels(1), field, target)?;
            Ok(warped.mask_where(|l| l != 0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Affine, Volume};
    use proptest::prelude::*;

    /// 1 mm grid centred so that voxel i=cx has x = 0.
    fn grid(n: [usize; 3]) -> Grid {
        let c = (n[0] / 2) as f64;
        Grid::new(n, Affine::from_spacing_origin([1.0; 3], [-c, -(n[1] as f64) / 2.0, 0.0]))
    }

    /// Straight midline in the x=0 plane spanning j in [y0, y1].
    fn straight(g: Grid, y0: usize, y1: usize) -> Mask {
        let mut m = Volume::filled(g, false);
        let cx = g.dims[0] / 2;
        for k in 0..g.dims[2] {
            for j in y0..=y1 {
                m.set(cx, j, k, true);
            }
        }
        m
    }

    /// Moves interior midline voxels by `d` voxels in x over slices `zs`.
    fn bow(m: &mut Mask, zs: std::ops::Range<usize>, y0: usize, y1: usize, d: i64) {
        let cx = m.dims()[0] / 2;
        for k in zs {
            for j in y0 + 1..y1 {
                m.set(cx, j, k, false);
                m.set((cx as i64 + d) as usize, j, k, true);
            }
        }
    }

    #[test]
    fn straight_midline_lies_on_x0() {
        let g = grid([21, 30, 5]);
        let ideal = ideal_midline(&straight(g, 5, 25)).unwrap();
        for s in ideal.segments.iter().flatten() {
            assert_eq!(s.anterior[0], 0.0);
            assert_eq!(s.posterior[0], 0.0);
            assert!(s.anterior[1] > s.posterior[1]);
        }
    }

    #[test]
    fn bowing_keeps_endpoints() {
        let g = grid([31, 30, 5]);
        let base = ideal_midline(&straight(g, 5, 25)).unwrap();
        let mut m = straight(g, 5, 25);
        bow(&mut m, 0..5, 5, 25, 6);
        assert_eq!(ideal_midline(&m).unwrap(), base);
    }

    #[test]
    fn single_voxel_slice_is_absent() {
        let g = grid([11, 11, 3]);
        let mut m = straight(g, 2, 8);
        for j in 2..=8 {
            m.set(5, j, 1, false);
        }
        m.set(5, 4, 1, true);
        let ideal = ideal_midline(&m).unwrap();
        assert!(ideal.segment(1).is_none());
        assert!(ideal.segment(0).is_some());
        let r = midline_deviation(&m, &ideal).unwrap();
        assert_eq!(r.skipped_slices, 1);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let g = grid([5, 5, 5]);
        assert!(matches!(
            ideal_midline(&Volume::filled(g, false)),
            Err(MidlineError::EmptyMidline)
        ));
    }

    #[test]
    fn undisplaced_midline_has_zero_shift() {
        let g = grid([21, 30, 5]);
        let m = straight(g, 5, 25);
        let r = midline_deviation(&m, &ideal_midline(&m).unwrap()).unwrap();
        assert_eq!(r.max_mls_mm, 0.0);
        assert_eq!(r.direction, None);
    }

    #[test]
    fn leftward_displacement() {
        let g = grid([31, 40, 20]);
        let mut m = straight(g, 5, 35);
        bow(&mut m, 5..15, 5, 35, -6);
        let r = midline_deviation(&m, &ideal_midline(&m).unwrap()).unwrap();
        assert!((r.max_mls_mm - 6.0).abs() <= 0.5);
        assert_eq!(r.direction, Some(Hemisphere::Left));
        assert!((5..15).contains(&r.slice_of_max.unwrap()));
        let recomputed = r.per_slice_max_mm.iter().flatten().fold(0.0f64, |a, &b| a.max(b));
        assert_eq!(recomputed, r.max_mls_mm);
    }

    #[test]
    fn tilted_line_distance() {
        let s = Segment {
            anterior: [0.0, 10.0, 0.0],
            posterior: [10.0, 0.0, 0.0],
        };
        // point (0,0) lies left of the line x + y = 10 at distance 10/sqrt(2)
        let d = s.signed_distance([0.0, 0.0, 0.0]);
        assert!((d + 10.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!((s.signed_distance([10.0, 10.0, 3.0]) - 10.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    fn block(g: Grid, xs: std::ops::Range<usize>) -> Mask {
        let mut m = Volume::filled(g, false);
        for k in 0..g.dims[2] {
            for j in 0..g.dims[1] {
                for i in xs.clone() {
                    m.set(i, j, k, true);
                }
            }
        }
        m
    }

    #[test]
    fn crossing_rules() {
        let g = grid([41, 20, 10]);
        let ideal = ideal_midline(&straight(g, 0, 19)).unwrap();
        // cx = 20; voxels 21.. are right of x=0
        assert!(!crosses_midline(&block(g, 21..30), &ideal, 1.0).unwrap());
        // 10 columns each side: 10*20*10 = 2000 voxels = 2 mL per side
        assert!(crosses_midline(&block(g, 10..31), &ideal, 1.0).unwrap());
        // 0.1 mL contralateral: one row of 100 voxels... 1 column * 20 * 5
        let mut m = block(g, 21..31);
        for k in 0..5 {
            for j in 0..20 {
                m.set(19, j, k, true);
            }
        }
        assert!(!crosses_midline(&m, &ideal, 1.0).unwrap());
        let c = side_counts(&block(g, 20..21), &ideal).unwrap();
        assert_eq!((c.left, c.right, c.on_line), (0, 0, 200));
    }

    #[test]
    fn level_labels() {
        use crate::anatomy::{merge_segmentations, AnatomyScheme, TumorScheme};
        let g = grid([10, 10, 50]);
        let mut anatomy = Volume::filled(g, 0u32);
        anatomy.set(1, 1, 3, 4);
        anatomy.set(1, 1, 7, 14);
        let empty = Volume::filled(g, 0u32);
        let mid = Volume::filled(g, false);
        let m = merge_segmentations(&anatomy, &empty, &mid, &AnatomyScheme::synthseg_dk(), TumorScheme::default())
            .unwrap();
        assert_eq!(mls_level_label(&m, 3), "level of the lateral ventricles");
        assert_eq!(mls_level_label(&m, 7), "level of the third ventricle");
        assert_eq!(mls_level_label(&m, 42), "level of slice 42");
    }

    #[test]
    fn atlas_source_is_warped() {
        let g = grid([21, 30, 5]);
        let atlas = straight(g, 5, 25);
        // sampling 2 mm to the left of each voxel moves the midline 2 mm right
        let field = DisplacementField::constant(g, [-2.0, 0.0, 0.0]);
        let m = subject_midline(&MidlineSource::Atlas { mask: atlas, field }, &g).unwrap();
        assert!(*m.get(12, 10, 2));
        assert_eq!(m.count_true(), 21 * 5);
    }

    proptest! {
        #[test]
        fn pure_displacement_is_recovered(d in -8i64..=8, tx in -50.0f64..50.0, ty in -50.0f64..50.0) {
            let n = [31, 40, 12];
            let g = Grid::new(n, Affine::from_spacing_origin([1.0; 3], [-15.0 + tx, -20.0 + ty, 3.0]));
            let mut m = straight(g, 4, 36);
            bow(&mut m, 3..9, 4, 36, d);
            let r = midline_deviation(&m, &ideal_midline(&m).unwrap()).unwrap();
            prop_assert!((r.max_mls_mm - d.abs() as f64).abs() <= 0.5);
            match d.signum() {
                -1 => prop_assert_eq!(r.direction, Some(Hemisphere::Left)),
                1 => prop_assert_eq!(r.direction, Some(Hemisphere::Right)),
                _ => prop_assert_eq!(r.direction, None),
            }
            // translation invariance against the untranslated phantom
            let g0 = Grid::new(n, Affine::from_spacing_origin([1.0; 3], [-15.0, -20.0, 3.0]));
            let m0 = Volume::from_vec(g0, m.data().to_vec()).unwrap();
            let r0 = midline_deviation(&m0, &ideal_midline(&m0).unwrap()).unwrap();
            for (a, b) in r.samples.iter().zip(&r0.samples) {
                prop_assert!((a.signed_mm - b.signed_mm).abs() < 1e-6);
            }
        }

        #[test]
        fn crossing_is_monotone(lo in 0.0f64..3.0, extra in 0.0f64..3.0, x0 in 5usize..20, w in 1usize..20) {
            let g = grid([41, 20, 10]);
            let ideal = ideal_midline(&straight(g, 0, 19)).unwrap();
            let r = block(g, x0..(x0 + w).min(41));
            let a = crosses_midline(&r, &ideal, lo).unwrap();
            let b = crosses_midline(&r, &ideal, lo + extra).unwrap();
            prop_assert!(a || !b);
        }
    }
}
