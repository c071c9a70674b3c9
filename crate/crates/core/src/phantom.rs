//! Synthetic head phantoms: an ellipsoidal brain with SynthSeg-style labels,
//! a sagittal midline sheet that can be bowed laterally, and spherical
//! BraTS-labelled lesions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vasari::CaseInputs;
use crate::volume::{Affine, Grid, LabelVolume, Mask, Volume};

/// Spherical lesion in voxel coordinates; radii in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub center: [f64; 3],
    pub ncr_radius: f64,
    pub core_radius: f64,
    pub edema_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    /// Peak lateral bowing of the midline in voxels (1 mm each); negative
    /// bows toward -x, the patient's left.
    pub shift_vox: i64,
    pub lesions: Vec<LesionSpec>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 72, 48],
            origin: [-32.0, -36.0, -24.0],
            shift_vox: 0,
            lesions: vec![],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub tumor: LabelVolume,
    pub anatomy: LabelVolume,
    pub midline: Mask,
}

impl Phantom {
    pub fn case_inputs(&self, subject_id: &str) -> CaseInputs {
        CaseInputs {
            subject_id: subject_id.to_string(),
            tumor: self.tumor.clone(),
            anatomy: Some(self.anatomy.clone()),
            midline: Some(self.midline.clone()),
            age: None,
            sex: None,
        }
    }
}

struct Ellipsoid {
    c: [f64; 3],
    r: [f64; 3],
}

impl Ellipsoid {
    fn of(dims: [usize; 3]) -> Self {
        let d = dims.map(|n| n as f64);
        Ellipsoid {
            c: [((dims[0] / 2) as f64), d[1] / 2.0, d[2] / 2.0],
            r: [0.42 * d[0], 0.45 * d[1], 0.42 * d[2]],
        }
    }

    fn rel(&self, p: [usize; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] as f64 - self.c[a]) / self.r[a])
    }

    fn norm(&self, p: [usize; 3]) -> f64 {
        self.rel(p).iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// SynthSeg + DK label for a voxel of the un-shifted brain.
fn anatomy_label(e: &Ellipsoid, p: [usize; 3]) -> u32 {
    let r = e.norm(p);
    if r > 1.0 {
        return 0;
    }
    let [rx, ry, rz] = e.rel(p);
    let left = (p[0] as f64) < e.c[0];
    if (p[0] as f64 - e.c[0]).abs() <= 1.0 && ry.abs() < 0.15 && (rz + 0.2).abs() < 0.1 {
        return 14;
    }
    if (rx.abs() - 0.2).abs() < 0.1 && ry.abs() < 0.25 && rz.abs() < 0.15 {
        return if left { 4 } else { 43 };
    }
    if r > 0.85 {
        let parcel = if ry > 0.3 {
            28
        } else if ry < -0.5 {
            11
        } else if rz >= 0.0 {
            29
        } else {
            30
        };
        return if left { 1000 } else { 2000 } + parcel;
    }
    if left {
        2
    } else {
        41
    }
}

/// Lateral offset (voxels) of the midline sheet at (y, z): a sine bow across
/// the slice's anterior-posterior extent, tapered in z over the central half
/// of slices so the peak sits at mid-height.
fn bow(e: &Ellipsoid, shift: i64, y: usize, y_lo: usize, y_hi: usize, z: usize) -> i64 {
    let rz = (z as f64 - e.c[2]) / e.r[2];
    if shift == 0 || rz.abs() > 0.5 || y_hi <= y_lo {
        return 0;
    }
    let t = (y - y_lo) as f64 / (y_hi - y_lo) as f64;
    let pi = std::f64::consts::PI;
    (shift as f64 * (pi * t).sin() * (pi * rz).cos()).round() as i64
}

pub fn build_phantom(spec: &PhantomSpec) -> Phantom {
    let grid = Grid::new(spec.dims, Affine::from_spacing_origin([1.0; 3], spec.origin));
    let e = Ellipsoid::of(spec.dims);
    let [nx, ny, nz] = spec.dims;
    let mut anatomy = Volume::filled(grid, 0u32);
    let mut midline = Volume::filled(grid, false);
    let mut tumor = Volume::filled(grid, 0u32);
    let cx = e.c[0] as usize;

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                anatomy.set(x, y, z, anatomy_label(&e, [x, y, z]));
            }
        }
        let inside: Vec<usize> = (0..ny).filter(|&y| e.norm([cx, y, z]) <= 1.0).collect();
        if let (Some(&lo), Some(&hi)) = (inside.first(), inside.last()) {
            for &y in &inside {
                let x = cx as i64 + bow(&e, spec.shift_vox, y, lo, hi, z);
                if (0..nx as i64).contains(&x) {
                    midline.set(x as usize, y, z, true);
                }
            }
        }
    }

    for l in &spec.lesions {
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let d = [x as f64 - l.center[0], y as f64 - l.center[1], z as f64 - l.center[2]];
                    let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let cur = *tumor.get(x, y, z);
                    let label = if r <= l.ncr_radius {
                        1
                    } else if r <= l.core_radius {
                        3
                    } else if r <= l.edema_radius && cur == 0 {
                        2
                    } else {
                        continue;
                    };
                    if cur == 0 || cur == 2 {
                        tumor.set(x, y, z, label);
                    }
                }
            }
        }
    }
    Phantom {
        spec: spec.clone(),
        tumor,
        anatomy,
        midline,
    }
}

/// Random phantom: one or two lesions in one hemisphere, midline bowed away
/// from them by 0 to 14 voxels.
pub fn random_spec(seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = PhantomSpec::default();
    let e = Ellipsoid::of(base.dims);
    let right = rng.random::<bool>();
    let side = if right { 1.0 } else { -1.0 };
    let n_lesions = if rng.random::<f64>() < 0.3 { 2 } else { 1 };
    let mut lesions = Vec::new();
    for k in 0..n_lesions {
        let core_radius = rng.random_range(4.0..7.0);
        let center = [
            e.c[0] + side * rng.random_range(10.0..14.0),
            e.c[1] + if k == 0 { rng.random_range(-6.0..6.0) } else { -22.0 },
            e.c[2] + rng.random_range(-4.0..4.0),
        ];
        lesions.push(LesionSpec {
            center,
            ncr_radius: core_radius * rng.random_range(0.0..0.6),
            core_radius,
            edema_radius: core_radius + rng.random_range(2.0..5.0),
        });
    }
    let magnitude = rng.random_range(0..=14i64);
    PhantomSpec {
        origin: [
            base.origin[0] + rng.random_range(-5..=5) as f64,
            base.origin[1] + rng.random_range(-5..=5) as f64,
            base.origin[2] + rng.random_range(-5..=5) as f64,
        ],
        shift_vox: if right { -magnitude } else { magnitude },
        lesions,
        ..base
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::AnatomyScheme;

    #[test]
    fn labels_are_known_and_bilateral() {
        let p = build_phantom(&PhantomSpec::default());
        let scheme = AnatomyScheme::synthseg_dk();
        let known = scheme.known_labels();
        let labels = p.anatomy.labels();
        assert!(labels.iter().all(|l| *l == 0 || known.contains(l)), "{labels:?}");
        for l in [2, 41, 4, 43, 14, 1028, 2030] {
            assert!(labels.contains(&l), "missing {l}");
        }
        assert!(p.tumor.labels().iter().all(|l| *l == 0));
        assert!(p.midline.count_true() > 100);
    }

    #[test]
    fn bowed_sheet_keeps_one_voxel_per_row() {
        let p = build_phantom(&PhantomSpec {
            shift_vox: -7,
            ..PhantomSpec::default()
        });
        let [nx, ny, nz] = p.spec.dims;
        let mut min_x = nx;
        for z in 0..nz {
            for y in 0..ny {
                let row: Vec<usize> = (0..nx).filter(|&x| *p.midline.get(x, y, z)).collect();
                assert!(row.len() <= 1);
                if let Some(&x) = row.first() {
                    min_x = min_x.min(x);
                }
            }
        }
        assert_eq!(min_x, 32 - 7);
    }

    #[test]
    fn lesion_labels() {
        let spec = PhantomSpec {
            lesions: vec![LesionSpec {
                center: [44.0, 36.0, 24.0],
                ncr_radius: 2.0,
                core_radius: 5.0,
                edema_radius: 8.0,
            }],
            ..PhantomSpec::default()
        };
        let p = build_phantom(&spec);
        assert_eq!(*p.tumor.get(44, 36, 24), 1);
        assert_eq!(*p.tumor.get(48, 36, 24), 3);
        assert_eq!(*p.tumor.get(51, 36, 24), 2);
        assert_eq!(*p.tumor.get(53, 36, 24), 0);
    }

    #[test]
    fn random_specs_are_deterministic() {
        assert_eq!(random_spec(9), random_spec(9));
        assert_ne!(random_spec(9), random_spec(10));
    }
}
