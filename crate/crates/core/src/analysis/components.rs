//! Connected-component labeling of lesion masks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::volume::LabelMask;

/// Neighbourhood used when deciding which foreground voxels touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

impl Connectivity {
    fn offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    if self == Connectivity::Six && dx.abs() + dy.abs() + dz.abs() != 1 {
                        continue;
                    }
                    out.push([dx, dy, dz]);
                }
            }
        }
        out
    }
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }
}

/// Lesions of one time point: a component-labeled mask plus per-lesion
/// bookkeeping. Ids are contiguous `1..=K`.
#[derive(Debug, Clone)]
pub struct LesionSet {
    pub mask: LabelMask,
    /// Disease-site tag per lesion id, where one has been assigned.
    pub site_of: BTreeMap<u32, String>,
    pub volumes_mm3: BTreeMap<u32, f64>,
}

impl LesionSet {
    pub fn ids(&self) -> Vec<u32> {
        self.volumes_mm3.keys().copied().collect()
    }
}

/// Label maximal connected foreground regions (any nonzero voxel is
/// foreground) as `1..=K`, largest volume first. Equal-sized components are
/// ordered by their smallest linear voxel index so labeling is total.
pub fn connected_components(mask: &LabelMask, connectivity: Connectivity) -> LesionSet {
    let grid = &mask.grid;
    let [nx, ny, nz] = grid.dims;
    let offsets = connectivity.offsets();
    let mut component = vec![0u32; grid.len()];
    // (voxel count, first voxel) per provisional component, index = id - 1
    let mut sizes: Vec<(usize, usize)> = Vec::new();
    let mut queue = Vec::new();

    for start in 0..grid.len() {
        if mask.labels[start] == 0 || component[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut count = 0usize;
        component[start] = id;
        queue.push(start);
        while let Some(i) = queue.pop() {
            count += 1;
            let (x, y, z) = grid.coords(i);
            for off in &offsets {
                let xx = x as i64 + off[0];
                let yy = y as i64 + off[1];
                let zz = z as i64 + off[2];
                if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64
                {
                    continue;
                }
                let j = grid.index(xx as usize, yy as usize, zz as usize);
                if mask.labels[j] != 0 && component[j] == 0 {
                    component[j] = id;
                    queue.push(j);
                }
            }
        }
        sizes.push((count, start));
    }

    // relabel: largest first, ties by earliest voxel
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(sizes[i].0), sizes[i].1));
    let mut relabel = vec![0u32; sizes.len() + 1];
    for (rank, &old) in order.iter().enumerate() {
        relabel[old + 1] = rank as u32 + 1;
    }
    for c in &mut component {
        *c = relabel[*c as usize];
    }

    let voxel_mm3 = grid.voxel_volume_mm3();
    let mut volumes = BTreeMap::new();
    for (rank, &old) in order.iter().enumerate() {
        volumes.insert(rank as u32 + 1, sizes[old].0 as f64 * voxel_mm3);
    }
    LesionSet {
        mask: LabelMask {
            grid: grid.clone(),
            labels: component,
        },
        site_of: BTreeMap::new(),
        volumes_mm3: volumes,
    }
}
