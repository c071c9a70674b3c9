//! Read-only case data on disk.
//!
//! ```text
//! <data_dir>/cases/<case_id>/
//!     t1n.nii.gz  t1c.nii.gz  t2w.nii.gz  t2f.nii.gz   (any subset; .nii also accepted)
//!     tumor.nii.gz                                      (optional label map)
//!     midline.nii.gz                                    (optional midline mask)
//!     reports/<framework>.txt
//! ```

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::RgbaImage;
use neurofind_core::midline::{ideal_midline, MidlineError};
use neurofind_core::volume::{
    brats_palette, load_nifti, midline_palette, render_axial_slice, Grid, IntensityVolume, LabelVolume, Overlay,
    Volume, VolumeError,
};
use serde::Serialize;
use thiserror::Error;

use crate::blinding::{blinding_permutation, slot_label};

pub const SEQUENCES: [&str; 4] = ["t1n", "t1c", "t2w", "t2f"];
pub const OVERLAYS: [&str; 3] = ["tumor", "midline", "ideal_midline"];

/// Percentile window used when the client does not supply one.
pub const DEFAULT_WINDOW_PCT: (f64, f64) = (0.5, 99.5);

const CACHE_LIMIT: usize = 48;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("invalid identifier {0:?}")]
    BadId(String),
    #[error("unknown case {0:?}")]
    UnknownCase(String),
    #[error("sequence {seq:?} is not available for case {case:?}")]
    UnknownSequence { case: String, seq: String },
    #[error("overlay {0:?} is not available for this case")]
    UnknownOverlay(String),
    #[error("slice {z} out of range (volume has {nz} slices)")]
    SliceOutOfRange { z: usize, nz: usize },
    #[error("invalid window: lo {lo} must be below hi {hi}")]
    BadWindow { lo: f64, hi: f64 },
    #[error("case {0:?} has no image sequences")]
    NoSequences(String),
    #[error("case {case:?}: {what} does not share the image grid")]
    GridMismatch { case: String, what: String },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Midline(#[from] MidlineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Identifiers become path components, so they are restricted to a safe
/// alphabet and may not start with a dot.
pub fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadId(id.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseSummary {
    pub case_id: String,
    pub sequences: Vec<String>,
    pub n_reports: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseInfo {
    pub case_id: String,
    pub sequences: Vec<String>,
    pub overlays: Vec<String>,
    pub grid: Grid,
    /// Registered frameworks with a report for this case, in registry order.
    pub frameworks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlindedReport {
    pub slot: String,
    pub text: String,
}

/// A case's reports in the order one reviewer sees them. `frameworks` is
/// kept server-side and is not serializable.
#[derive(Debug, Clone)]
pub struct BlindedReports {
    pub reports: Vec<BlindedReport>,
    frameworks: Vec<String>,
}

impl BlindedReports {
    pub fn slots(&self) -> Vec<String> {
        self.reports.iter().map(|r| r.slot.clone()).collect()
    }

    pub fn framework_of(&self, slot: &str) -> Option<&str> {
        let i = self.reports.iter().position(|r| r.slot == slot)?;
        Some(&self.frameworks[i])
    }
}

#[derive(Debug, Clone)]
pub struct SliceRequest {
    pub sequence: String,
    pub z: usize,
    pub overlays: Vec<String>,
    pub window: Option<(f64, f64)>,
}

#[derive(Debug, Clone)]
enum Cached {
    Image(Arc<IntensityVolume>),
    Labels(Arc<LabelVolume>),
}

#[derive(Debug)]
pub struct CaseStore {
    root: PathBuf,
    frameworks: Vec<String>,
    seed: u64,
    cache: Mutex<HashMap<(String, String), Cached>>,
}

fn find_volume(dir: &Path, stem: &str) -> Option<PathBuf> {
    [format!("{stem}.nii.gz"), format!("{stem}.nii")]
        .into_iter()
        .map(|f| dir.join(f))
        .find(|p| p.is_file())
}

/// Linear-interpolated percentile of `vals` (sorted in place), `pct` in [0, 100].
fn percentile(vals: &mut [f32], pct: f64) -> f64 {
    vals.sort_by(f32::total_cmp);
    let pos = pct / 100.0 * (vals.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    let a = vals[i] as f64;
    let b = vals[(i + 1).min(vals.len() - 1)] as f64;
    a + frac * (b - a)
}

pub fn default_window(vol: &IntensityVolume) -> (f64, f64) {
    let mut vals: Vec<f32> = vol.data().iter().copied().filter(|v| v.is_finite()).collect();
    if vals.is_empty() {
        return (0.0, 1.0);
    }
    let lo = percentile(&mut vals, DEFAULT_WINDOW_PCT.0);
    let hi = percentile(&mut vals, DEFAULT_WINDOW_PCT.1);
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

/// Draws each slice's ideal midline segment as label 1.
pub fn rasterize_ideal_midline(midline: &Volume<bool>) -> Result<LabelVolume> {
    let grid = *midline.grid();
    let ideal = ideal_midline(midline)?;
    let mut out = Volume::filled(grid, 0u32);
    for (z, seg) in ideal.segments.iter().enumerate() {
        let Some(seg) = seg else { continue };
        let a = grid.affine.world_to_voxel(seg.anterior)?;
        let b = grid.affine.world_to_voxel(seg.posterior)?;
        let steps = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (a[0] + t * (b[0] - a[0])).round() as i64;
            let y = (a[1] + t * (b[1] - a[1])).round() as i64;
            if grid.contains(x, y, z as i64) {
                out.set(x as usize, y as usize, z, 1);
            }
        }
    }
    Ok(out)
}

impl CaseStore {
    pub fn new(data_dir: impl Into<PathBuf>, frameworks: Vec<String>, seed: u64) -> Self {
        CaseStore {
            root: data_dir.into().join("cases"),
            frameworks,
            seed,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn frameworks(&self) -> &[String] {
        &self.frameworks
    }

    fn case_dir(&self, case_id: &str) -> Result<PathBuf> {
        check_id(case_id)?;
        let dir = self.root.join(case_id);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(StoreError::UnknownCase(case_id.to_string()))
        }
    }

    fn sequences_in(dir: &Path) -> Vec<String> {
        SEQUENCES
            .iter()
            .filter(|s| find_volume(dir, s).is_some())
            .map(|s| s.to_string())
            .collect()
    }

    fn frameworks_in(&self, dir: &Path) -> Vec<String> {
        self.frameworks
            .iter()
            .filter(|f| dir.join("reports").join(format!("{f}.txt")).is_file())
            .cloned()
            .collect()
    }

    pub fn list_cases(&self) -> Result<Vec<CaseSummary>> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let entry = entry?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if check_id(&name).is_err() || !entry.path().is_dir() {
                continue;
            }
            let sequences = Self::sequences_in(&entry.path());
            if sequences.is_empty() {
                continue;
            }
            out.push(CaseSummary {
                n_reports: self.frameworks_in(&entry.path()).len(),
                case_id: name,
                sequences,
            });
        }
        out.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        Ok(out)
    }

    pub fn case_info(&self, case_id: &str) -> Result<CaseInfo> {
        let dir = self.case_dir(case_id)?;
        let sequences = Self::sequences_in(&dir);
        let first = sequences.first().ok_or_else(|| StoreError::NoSequences(case_id.to_string()))?;
        let grid = *self.image(case_id, first)?.grid();
        let mut overlays = Vec::new();
        if find_volume(&dir, "tumor").is_some() {
            overlays.push("tumor".to_string());
        }
        if find_volume(&dir, "midline").is_some() {
            overlays.push("midline".to_string());
            overlays.push("ideal_midline".to_string());
        }
        Ok(CaseInfo {
            case_id: case_id.to_string(),
            sequences,
            overlays,
            grid,
            frameworks: self.frameworks_in(&dir),
        })
    }

    /// Reports of `case_id` in the order assigned to `reviewer_id`.
    pub fn blinded_reports(&self, case_id: &str, reviewer_id: &str) -> Result<BlindedReports> {
        check_id(reviewer_id)?;
        let dir = self.case_dir(case_id)?;
        let present = self.frameworks_in(&dir);
        let perm = blinding_permutation(self.seed, case_id, reviewer_id, present.len());
        let mut reports = Vec::with_capacity(present.len());
        let mut frameworks = Vec::with_capacity(present.len());
        for (i, &k) in perm.iter().enumerate() {
            let text = std::fs::read_to_string(dir.join("reports").join(format!("{}.txt", present[k])))?;
            reports.push(BlindedReport {
                slot: slot_label(i),
                text,
            });
            frameworks.push(present[k].clone());
        }
        Ok(BlindedReports { reports, frameworks })
    }

    fn cached(&self, case_id: &str, key: &str, load: impl FnOnce() -> Result<Cached>) -> Result<Cached> {
        let k = (case_id.to_string(), key.to_string());
        if let Some(c) = self.cache.lock().unwrap().get(&k) {
            return Ok(c.clone());
        }
        let v = load()?;
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= CACHE_LIMIT {
            cache.clear();
        }
        cache.insert(k, v.clone());
        Ok(v)
    }

    pub fn image(&self, case_id: &str, seq: &str) -> Result<Arc<IntensityVolume>> {
        let dir = self.case_dir(case_id)?;
        let unknown = || StoreError::UnknownSequence {
            case: case_id.to_string(),
            seq: seq.to_string(),
        };
        if !SEQUENCES.contains(&seq) {
            return Err(unknown());
        }
        let path = find_volume(&dir, seq).ok_or_else(unknown)?;
        match self.cached(case_id, seq, || Ok(Cached::Image(Arc::new(load_nifti(&path)?.to_intensity()))))? {
            Cached::Image(v) => Ok(v),
            Cached::Labels(_) => unreachable!("sequence keys hold images"),
        }
    }

    fn overlay_labels(&self, case_id: &str, name: &str) -> Result<Arc<LabelVolume>> {
        let dir = self.case_dir(case_id)?;
        let missing = || StoreError::UnknownOverlay(name.to_string());
        let load = || -> Result<Cached> {
            let vol = match name {
                "tumor" => load_nifti(find_volume(&dir, "tumor").ok_or_else(missing)?)?.to_labels()?,
                "midline" => load_nifti(find_volume(&dir, "midline").ok_or_else(missing)?)?
                    .to_mask()
                    .to_labels(1),
                "ideal_midline" => {
                    let mask = load_nifti(find_volume(&dir, "midline").ok_or_else(missing)?)?.to_mask();
                    rasterize_ideal_midline(&mask)?
                }
                _ => return Err(missing()),
            };
            Ok(Cached::Labels(Arc::new(vol)))
        };
        match self.cached(case_id, &format!("overlay:{name}"), load)? {
            Cached::Labels(v) => Ok(v),
            Cached::Image(_) => unreachable!("overlay keys hold labels"),
        }
    }

    /// Renders one axial slice with the requested overlays.
    pub fn render_slice(&self, case_id: &str, req: &SliceRequest) -> Result<(RgbaImage, [f64; 3])> {
        let img = self.image(case_id, &req.sequence)?;
        let [_, _, nz] = img.dims();
        if req.z >= nz {
            return Err(StoreError::SliceOutOfRange { z: req.z, nz });
        }
        let window = match req.window {
            Some((lo, hi)) if !(lo < hi) => return Err(StoreError::BadWindow { lo, hi }),
            Some(w) => w,
            None => default_window(&img),
        };
        let mut layers = Vec::new();
        for name in &req.overlays {
            let labels = self.overlay_labels(case_id, name)?;
            if !img.grid().matches(labels.grid(), 1e-4) {
                return Err(StoreError::GridMismatch {
                    case: case_id.to_string(),
                    what: name.clone(),
                });
            }
            let palette = match name.as_str() {
                "tumor" => brats_palette(1, 2, 3),
                "midline" => midline_palette(1, [60, 160, 255, 255]),
                _ => midline_palette(1, [255, 60, 220, 255]),
            };
            layers.push((labels, palette));
        }
        let overlays: Vec<Overlay<'_>> = layers
            .iter()
            .map(|(labels, palette)| Overlay {
                labels,
                palette: palette.clone(),
            })
            .collect();
        let png = render_axial_slice(&img, req.z, window, &overlays)?;
        Ok((png, img.spacing()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurofind_core::volume::Affine;

    #[test]
    fn ids() {
        for ok in ["case_001", "BraTS-GLI-00001-000", "a.b"] {
            assert!(check_id(ok).is_ok(), "{ok}");
        }
        for bad in ["", ".hidden", "..", "a/b", "a\\b", "x y", "é"] {
            assert!(check_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn percentile_window() {
        let grid = Grid::with_spacing([10, 10, 2], [1.0; 3]);
        let data: Vec<f32> = (0..200).map(|i| i as f32).collect();
        let vol = Volume::from_vec(grid, data).unwrap();
        let (lo, hi) = default_window(&vol);
        assert!((lo - 0.995).abs() < 1e-9, "{lo}");
        assert!((hi - 198.005).abs() < 1e-9, "{hi}");
        let flat = Volume::filled(grid, 3.0f32);
        assert_eq!(default_window(&flat), (3.0, 4.0));
    }

    #[test]
    fn ideal_line_passes_through_endpoints() {
        let grid = Grid::new([20, 30, 3], Affine::from_spacing_origin([1.0; 3], [-10.0, -15.0, 0.0]));
        let mut m = Volume::filled(grid, false);
        // straight sheet at x = 10 with a bulge on slice 1
        for z in 0..3 {
            for y in 5..25 {
                m.set(10, y, z, true);
            }
        }
        m.set(10, 15, 1, false);
        m.set(14, 15, 1, true);
        let r = rasterize_ideal_midline(&m).unwrap();
        for z in 0..3 {
            for y in 5..25 {
                assert_eq!(*r.get(10, y, z), 1, "({y},{z})");
            }
        }
        assert_eq!(*r.get(14, 15, 1), 0);
        assert_eq!(r.count(1), 60);
    }
}
