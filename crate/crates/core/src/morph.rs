//! Connected components and Euclidean distance transforms on voxel grids.

use serde::{Deserialize, Serialize};

use crate::volume::{Grid, LabelVolume, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Connectivity::Six),
            18 => Some(Connectivity::Eighteen),
            26 => Some(Connectivity::TwentySix),
            _ => None,
        }
    }

    /// Neighbour offsets for this connectivity.
    pub fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dk in -1i64..=1 {
            for dj in -1i64..=1 {
                for di in -1i64..=1 {
                    let nz = (di != 0) as u8 + (dj != 0) as u8 + (dk != 0) as u8;
                    let keep = match self {
                        Connectivity::Six => nz == 1,
                        Connectivity::Eighteen => nz == 1 || nz == 2,
                        Connectivity::TwentySix => nz >= 1,
                    };
                    if keep {
                        out.push([di, dj, dk]);
                    }
                }
            }
        }
        out
    }

    /// Offsets that precede the current voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        self.offsets()
            .into_iter()
            .filter(|o| (o[2], o[1], o[0]) < (0, 0, 0))
            .collect()
    }
}

/// Component labelling: 0 is background, components are numbered 1..=K in
/// order of descending voxel count (ties by first voxel in scan order).
#[derive(Debug, Clone)]
pub struct Components {
    pub labels: LabelVolume,
    /// `sizes[c - 1]` is the voxel count of component `c`.
    pub sizes: Vec<usize>,
}

impl Components {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn mask_of(&self, component: u32) -> Mask {
        self.labels.mask_where(|l| l == component)
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let p = self.parent[x as usize];
            self.parent[x as usize] = self.parent[p as usize];
            x = p;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels maximal connected components of `mask` (two-pass union-find).
pub fn connected_components_3d(mask: &Mask, connectivity: Connectivity) -> Components {
    let grid = *mask.grid();
    let [nx, ny, nz] = grid.dims;
    let back = connectivity.backward_offsets();
    let mut provisional = vec![0u32; grid.len()];
    let mut uf = UnionFind { parent: vec![0] };

    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = grid.index(i, j, k);
                if !mask.data()[idx] {
                    continue;
                }
                let mut current = 0u32;
                for o in &back {
                    let (a, b, c) = (i as i64 + o[0], j as i64 + o[1], k as i64 + o[2]);
                    if !grid.contains(a, b, c) {
                        continue;
                    }
                    let n = provisional[grid.index(a as usize, b as usize, c as usize)];
                    if n == 0 {
                        continue;
                    }
                    if current == 0 {
                        current = n;
                    } else if current != n {
                        uf.union(current, n);
                    }
                }
                if current == 0 {
                    current = uf.parent.len() as u32;
                    uf.parent.push(current);
                }
                provisional[idx] = current;
            }
        }
    }

    // Resolve roots, recording first-seen order and sizes.
    let mut root_slot: Vec<u32> = vec![u32::MAX; uf.parent.len()];
    let mut sizes: Vec<usize> = Vec::new();
    let mut first: Vec<usize> = Vec::new();
    for (idx, p) in provisional.iter_mut().enumerate() {
        if *p == 0 {
            continue;
        }
        let r = uf.find(*p) as usize;
        if root_slot[r] == u32::MAX {
            root_slot[r] = sizes.len() as u32;
            sizes.push(0);
            first.push(idx);
        }
        let s = root_slot[r];
        sizes[s as usize] += 1;
        *p = s + 1;
    }

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(first[a].cmp(&first[b])));
    let mut remap = vec![0u32; sizes.len() + 1];
    for (rank, &slot) in order.iter().enumerate() {
        remap[slot + 1] = rank as u32 + 1;
    }
    let labels: Vec<u32> = provisional.iter().map(|&p| remap[p as usize]).collect();
    let sorted_sizes = order.iter().map(|&s| sizes[s]).collect();
    Components {
        labels: Volume::from_vec(grid, labels).expect("same grid"),
        sizes: sorted_sizes,
    }
}

/// Euclidean distance (mm) from every voxel to the nearest `site` voxel,
/// using the grid's axis spacing. Without any site every distance is
/// infinite.
pub fn distance_to_sites(grid: &Grid, sites: &[bool]) -> Vec<f64> {
    assert_eq!(sites.len(), grid.len());
    let spacing = grid.spacing();
    let mut d: Vec<f64> = sites
        .iter()
        .map(|&s| if s { 0.0 } else { f64::INFINITY })
        .collect();
    let dims = grid.dims;
    for axis in 0..3 {
        let n = dims[axis];
        let stride = match axis {
            0 => 1,
            1 => dims[0],
            _ => dims[0] * dims[1],
        };
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let mut v = vec![0usize; n];
        let mut z = vec![0.0; n + 1];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for b in 0..dims[ob] {
            for a in 0..dims[oa] {
                let mut c = [0usize; 3];
                c[oa] = a;
                c[ob] = b;
                let base = grid.index(c[0], c[1], c[2]);
                for q in 0..n {
                    line[q] = d[base + q * stride];
                }
                squared_dt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
                for q in 0..n {
                    d[base + q * stride] = out[q];
                }
            }
        }
    }
    d.iter_mut().for_each(|x| *x = x.sqrt());
    d
}

/// Lower envelope of parabolas (Felzenszwalb & Huttenlocher), operating on
/// squared distances with sample spacing `s`.
fn squared_dt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k: usize = 0;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        let xq = q as f64 * s;
        loop {
            let p = v[k];
            let xp = p as f64 * s;
            let sect = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
            if sect <= z[k] {
                // z[0] is -inf, so this only happens for k > 0
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = sect;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let xq = q as f64 * s;
        while z[k + 1] < xq {
            k += 1;
        }
        let xp = v[k] as f64 * s;
        *o = (xq - xp) * (xq - xp) + f[v[k]];
    }
}

/// Distance (mm) from each voxel inside `mask` to the nearest voxel outside
/// it; voxels beyond the grid border count as outside. Outside voxels get 0.
pub fn inside_distance(mask: &Mask) -> Vec<f64> {
    let g = mask.grid();
    let [nx, ny, nz] = g.dims;
    // pad by one voxel so the border acts as background
    let padded = Grid::new([nx + 2, ny + 2, nz + 2], g.affine);
    let mut sites = vec![true; padded.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if *mask.get(i, j, k) {
                    sites[padded.index(i + 1, j + 1, k + 1)] = false;
                }
            }
        }
    }
    let d = distance_to_sites(&padded, &sites);
    let mut out = vec![0.0; g.len()];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                out[g.index(i, j, k)] = d[padded.index(i + 1, j + 1, k + 1)];
            }
        }
    }
    out
}
