use nalgebra::Matrix4;

use super::{Affine, Grid, Volume};

/// Axis permutation and flips that bring a grid to RAS.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Reorientation {
    /// New axis `a` reads old axis `perm[a]`.
    perm: [usize; 3],
    flip: [bool; 3],
    old_dims: [usize; 3],
    new_grid: Grid,
}

impl Reorientation {
    pub(crate) fn for_grid(grid: &Grid) -> Self {
        let lin = grid.affine.linear();
        let mut perm = [usize::MAX; 3];
        let mut flip = [false; 3];
        let mut used_world = [false; 3];
        let mut used_voxel = [false; 3];
        // Greedy assignment on the largest remaining coefficient keeps the
        // result a permutation even for strongly oblique matrices.
        for _ in 0..3 {
            let mut best = (0usize, 0usize, -1.0f64);
            for w in 0..3 {
                if used_world[w] {
                    continue;
                }
                for v in 0..3 {
                    if used_voxel[v] {
                        continue;
                    }
                    let c = lin[(w, v)].abs();
                    if c > best.2 {
                        best = (w, v, c);
                    }
                }
            }
            let (w, v, _) = best;
            used_world[w] = true;
            used_voxel[v] = true;
            perm[w] = v;
            flip[w] = lin[(w, v)] < 0.0;
        }

        let old_dims = grid.dims;
        let new_dims = [old_dims[perm[0]], old_dims[perm[1]], old_dims[perm[2]]];
        // Homogeneous map from new voxel indices to old voxel indices.
        let mut m = Matrix4::zeros();
        m[(3, 3)] = 1.0;
        for w in 0..3 {
            let v = perm[w];
            if flip[w] {
                m[(v, w)] = -1.0;
                m[(v, 3)] = (old_dims[v] as f64) - 1.0;
            } else {
                m[(v, w)] = 1.0;
            }
        }
        let new_affine = Affine(grid.affine.0 * m);
        Reorientation {
            perm,
            flip,
            old_dims,
            new_grid: Grid::new(new_dims, new_affine),
        }
    }

    pub(crate) fn is_identity(&self) -> bool {
        self.perm == [0, 1, 2] && self.flip == [false; 3]
    }

    pub(crate) fn new_grid(&self) -> Grid {
        self.new_grid
    }

    /// Rearranges `data` (old layout, `stride` values per voxel in separate
    /// contiguous blocks of one volume each) into the new layout.
    pub(crate) fn apply_blocks<T: Clone>(&self, data: &[T], blocks: usize) -> Vec<T> {
        if self.is_identity() {
            return data.to_vec();
        }
        let n = self.new_grid.len();
        let nd = self.new_grid.dims;
        let od = self.old_dims;
        let mut out = Vec::with_capacity(data.len());
        for b in 0..blocks {
            let src = &data[b * n..(b + 1) * n];
            for k in 0..nd[2] {
                for j in 0..nd[1] {
                    for i in 0..nd[0] {
                        let newc = [i, j, k];
                        let mut oldc = [0usize; 3];
                        for w in 0..3 {
                            let v = self.perm[w];
                            oldc[v] = if self.flip[w] {
                                od[v] - 1 - newc[w]
                            } else {
                                newc[w]
                            };
                        }
                        let oi = oldc[0] + od[0] * (oldc[1] + od[1] * oldc[2]);
                        out.push(src[oi].clone());
                    }
                }
            }
        }
        out
    }
}

/// Permutes and flips voxel axes so that voxel axes run along +x, +y, +z.
/// World positions of every voxel are unchanged.
pub fn reorient_to_ras<T: Clone>(vol: &Volume<T>) -> Volume<T> {
    let r = Reorientation::for_grid(vol.grid());
    let data = r.apply_blocks(vol.data(), 1);
    Volume::from_vec(r.new_grid(), data).expect("reorientation preserves voxel count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn las_volume_is_flipped_along_x() {
        // x axis points left: voxel i sits at world x = -i.
        let affine = Affine::from_rows([
            [-1.0, 0.0, 0.0, 3.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
        ]);
        let grid = Grid::new([4, 2, 1], affine);
        let data: Vec<u32> = (0..8).collect();
        let vol = Volume::from_vec(grid, data).unwrap();
        let ras = reorient_to_ras(&vol);
        let sp = ras.affine().linear();
        assert!(sp[(0, 0)] > 0.0 && sp[(1, 1)] > 0.0 && sp[(2, 2)] > 0.0);
        // every voxel keeps its world position
        for idx in 0..vol.grid().len() {
            let w = vol.grid().world(idx);
            let v = ras.affine().world_to_voxel(w).unwrap();
            let (i, j, k) = (v[0].round() as usize, v[1].round() as usize, v[2].round() as usize);
            assert_eq!(ras.get(i, j, k), &vol.data()[idx]);
        }
    }

    #[test]
    fn permuted_axes_are_restored() {
        // voxel axis 0 -> world z, axis 1 -> world x (negated), axis 2 -> world y
        let affine = Affine::from_rows([
            [0.0, -2.0, 0.0, 10.0],
            [0.0, 0.0, 1.5, -4.0],
            [1.0, 0.0, 0.0, 1.0],
        ]);
        let grid = Grid::new([3, 4, 5], affine);
        let data: Vec<u32> = (0..60).collect();
        let vol = Volume::from_vec(grid, data).unwrap();
        let ras = reorient_to_ras(&vol);
        assert_eq!(ras.dims(), [4, 5, 3]);
        let s = ras.spacing();
        assert!((s[0] - 2.0).abs() < 1e-12 && (s[1] - 1.5).abs() < 1e-12 && (s[2] - 1.0).abs() < 1e-12);
        for idx in 0..vol.grid().len() {
            let w = vol.grid().world(idx);
            let v = ras.affine().world_to_voxel(w).unwrap();
            let (i, j, k) = (v[0].round() as usize, v[1].round() as usize, v[2].round() as usize);
            assert_eq!(ras.get(i, j, k), &vol.data()[idx]);
        }
    }
}
