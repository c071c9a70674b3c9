use super::{DisplacementField, Grid, LabelVolume, Result, Volume};

/// Pulls `labels` onto `target`: each target voxel samples the source at
/// `world(v) + field(v)` with nearest-neighbour lookup. Samples falling
/// outside the source grid become background.
pub fn apply_displacement_field(
    labels: &LabelVolume,
    field: &DisplacementField,
    target: &Grid,
) -> Result<LabelVolume> {
    field.grid().ensure_matches(target, "displacement field vs target grid")?;
    sample_nearest(labels, target, |idx, p| {
        let d = field.vectors()[idx];
        [p[0] + d[0], p[1] + d[1], p[2] + d[2]]
    })
}

/// Nearest-neighbour resampling of labels onto another grid.
pub fn resample_nearest(labels: &LabelVolume, target: &Grid) -> Result<LabelVolume> {
    sample_nearest(labels, target, |_, p| p)
}

fn sample_nearest(
    labels: &LabelVolume,
    target: &Grid,
    displace: impl Fn(usize, [f64; 3]) -> [f64; 3],
) -> Result<LabelVolume> {
    let src = labels.grid();
    // validates invertibility once
    src.affine.world_to_voxel([0.0; 3])?;
    let mut out = Vec::with_capacity(target.len());
    for idx in 0..target.len() {
        let p = displace(idx, target.world(idx));
        let v = src.affine.world_to_voxel(p)?;
        // Round half away from zero after snapping tiny float noise.
        let snap = |c: f64| {
            let r = (c * 1e9).round() / 1e9;
            r.round() as i64
        };
        let (i, j, k) = (snap(v[0]), snap(v[1]), snap(v[2]));
        if src.contains(i, j, k) {
            out.push(*labels.get(i as usize, j as usize, k as usize));
        } else {
            out.push(0);
        }
    }
    Volume::from_vec(*target, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Affine;

    #[test]
    fn zero_field_is_identity() {
        let g = Grid::new(
            [5, 4, 3],
            Affine::from_rows([[1.2, 0.0, 0.0, 3.0], [0.0, 0.9, 0.0, -7.0], [0.0, 0.0, 2.0, 1.0]]),
        );
        let labels = Volume::from_vec(g, (0..60u32).map(|v| v % 7).collect()).unwrap();
        let out = apply_displacement_field(&labels, &DisplacementField::zeros(g), &g).unwrap();
        assert_eq!(out, labels);
        assert_eq!(resample_nearest(&labels, &g).unwrap(), labels);
    }

    #[test]
    fn field_leaving_source_gives_background() {
        let g = Grid::with_spacing([4, 4, 4], [1.0; 3]);
        let labels = Volume::filled(g, 3u32);
        let f = DisplacementField::constant(g, [100.0, 0.0, 0.0]);
        let out = apply_displacement_field(&labels, &f, &g).unwrap();
        assert!(out.data().iter().all(|&l| l == 0));
    }

    #[test]
    fn field_on_wrong_grid_is_rejected() {
        let g = Grid::with_spacing([4, 4, 4], [1.0; 3]);
        let other = Grid::with_spacing([4, 4, 5], [1.0; 3]);
        let labels = Volume::filled(g, 1u32);
        assert!(apply_displacement_field(&labels, &DisplacementField::zeros(other), &g).is_err());
    }
}
