//! Two-pass union-find connected-component labelling.

use serde::{Deserialize, Serialize};

use super::BinaryMask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Face = 6,
    Edge = 18,
    Corner = 26,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Face),
            18 => Ok(Connectivity::Edge),
            26 => Ok(Connectivity::Corner),
            other => Err(Error::Config(format!(
                "connectivity {other} not in {{6, 18, 26}}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        c as u8
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in z-major scan order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nonzero = [dz, dy, dx].iter().filter(|&&v| v != 0).count();
                    let allowed = match self {
                        Connectivity::Face => nonzero == 1,
                        Connectivity::Edge => (1..=2).contains(&nonzero),
                        Connectivity::Corner => nonzero >= 1,
                    };
                    let earlier = (dz, dy, dx) < (0, 0, 0);
                    if allowed && earlier {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

fn find(parent: &mut [u32], mut i: u32) -> u32 {
    while parent[i as usize] != i {
        let next = parent[i as usize];
        parent[i as usize] = parent[next as usize];
        i = next;
    }
    i
}

/// Maximal connected foreground sets, each a sorted list of flat voxel
/// indices, ordered by their smallest index.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> Vec<Vec<usize>> {
    let [nz, ny, nx] = mask.dims;
    let offsets = connectivity.backward_offsets();
    let mut provisional = vec![u32::MAX; mask.bits.len()];
    let mut parent: Vec<u32> = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = mask.index(z, y, x);
                if !mask.bits[i] {
                    continue;
                }
                let mut label = u32::MAX;
                for o in &offsets {
                    let (qz, qy, qx) = (z as i64 + o[0], y as i64 + o[1], x as i64 + o[2]);
                    if qz < 0 || qy < 0 || qx < 0 || qx >= nx as i64 || qy >= ny as i64 {
                        continue;
                    }
                    let q = mask.index(qz as usize, qy as usize, qx as usize);
                    let ql = provisional[q];
                    if ql == u32::MAX {
                        continue;
                    }
                    if label == u32::MAX {
                        label = find(&mut parent, ql);
                    } else {
                        let (a, b) = (find(&mut parent, label), find(&mut parent, ql));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            label = lo;
                        }
                    }
                }
                if label == u32::MAX {
                    label = parent.len() as u32;
                    parent.push(label);
                }
                provisional[i] = label;
            }
        }
    }
    let mut slot = vec![usize::MAX; parent.len()];
    let mut components: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in provisional.iter().enumerate() {
        if l == u32::MAX {
            continue;
        }
        let root = find(&mut parent, l) as usize;
        if slot[root] == usize::MAX {
            slot[root] = components.len();
            components.push(Vec::new());
        }
        components[slot[root]].push(i);
    }
    components
}
