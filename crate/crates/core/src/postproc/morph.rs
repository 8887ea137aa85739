//! Binary dilation, erosion and closing. Voxels outside the volume are
//! background.

use super::BinaryMask;
use crate::error::{Error, Result};

/// Set of `(dz, dy, dx)` offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    offsets: Vec<[i32; 3]>,
    /// Half-widths when the element is a full axis-aligned box.
    box_radius: Option<[usize; 3]>,
}

impl StructuringElement {
    pub fn new(mut offsets: Vec<[i32; 3]>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("empty structuring element".into()));
        }
        offsets.sort_unstable();
        offsets.dedup();
        let box_radius = detect_box(&offsets);
        Ok(StructuringElement {
            offsets,
            box_radius,
        })
    }

    /// Full cube of edge `2 * radius + 1`.
    pub fn cube(radius: usize) -> Self {
        let r = radius as i32;
        let mut offsets = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    offsets.push([dz, dy, dx]);
                }
            }
        }
        StructuringElement::new(offsets).expect("nonempty cube")
    }

    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    pub fn contains_origin(&self) -> bool {
        self.offsets.contains(&[0, 0, 0])
    }

    pub fn reflect(&self) -> Self {
        StructuringElement::new(self.offsets.iter().map(|o| o.map(|v| -v)).collect())
            .expect("nonempty")
    }

    /// Largest absolute offset on any axis.
    pub fn reach(&self) -> usize {
        self.offsets
            .iter()
            .flat_map(|o| o.iter().map(|v| v.unsigned_abs() as usize))
            .max()
            .unwrap_or(0)
    }
}

fn detect_box(offsets: &[[i32; 3]]) -> Option<[usize; 3]> {
    let mut r = [0usize; 3];
    for a in 0..3 {
        let lo = offsets.iter().map(|o| o[a]).min()?;
        let hi = offsets.iter().map(|o| o[a]).max()?;
        if lo != -hi {
            return None;
        }
        r[a] = hi as usize;
    }
    let full = r.iter().map(|&v| 2 * v + 1).product::<usize>();
    (full == offsets.len()).then_some(r)
}

/// Running OR (dilate) or AND (erode) over a window of `radius` along one
/// axis, with out-of-range positions reading as background.
fn axis_pass(mask: &BinaryMask, axis: usize, radius: usize, dilate: bool) -> BinaryMask {
    if radius == 0 {
        return mask.clone();
    }
    let dims = mask.dims;
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    let len = dims[axis];
    let mut out = vec![false; mask.bits.len()];
    let r = radius as isize;
    for start in 0..mask.bits.len() {
        let pos = (start / stride) % len;
        if pos != 0 {
            continue;
        }
        // `start` is the first voxel of a line along `axis`.
        let mut prefix = vec![0usize; len + 1];
        for i in 0..len {
            prefix[i + 1] = prefix[i] + mask.bits[start + i * stride] as usize;
        }
        for i in 0..len as isize {
            let lo = (i - r).max(0) as usize;
            let hi = ((i + r) as usize).min(len - 1);
            let count = prefix[hi + 1] - prefix[lo];
            out[start + i as usize * stride] = if dilate {
                count > 0
            } else {
                count == 2 * radius + 1
            };
        }
    }
    BinaryMask {
        dims,
        bits: out,
    }
}

fn generic(mask: &BinaryMask, se: &StructuringElement, dilate: bool) -> BinaryMask {
    let [nz, ny, nx] = mask.dims;
    let mut out = BinaryMask::empty(mask.dims);
    let at = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < nz
            && (y as usize) < ny
            && (x as usize) < nx
            && mask.bits[mask.index(z as usize, y as usize, x as usize)]
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let v = if dilate {
                    se.offsets().iter().any(|o| {
                        at(zi - o[0] as isize, yi - o[1] as isize, xi - o[2] as isize)
                    })
                } else {
                    se.offsets().iter().all(|o| {
                        at(zi + o[0] as isize, yi + o[1] as isize, xi + o[2] as isize)
                    })
                };
                let i = out.index(z, y, x);
                out.bits[i] = v;
            }
        }
    }
    out
}

/// Minkowski dilation: `p` is set when `p - o` is set for some offset `o`.
pub fn dilate(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    match se.box_radius {
        Some(r) => (0..3).fold(mask.clone(), |m, a| axis_pass(&m, a, r[a], true)),
        None => generic(mask, se, true),
    }
}

/// Minkowski erosion: `p` is set when `p + o` is set for every offset `o`.
pub fn erode(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    match se.box_radius {
        Some(r) => (0..3).fold(mask.clone(), |m, a| axis_pass(&m, a, r[a], false)),
        None => generic(mask, se, false),
    }
}

/// Dilation followed by erosion, computed on a background margin wide
/// enough that the volume border does not erode foreground.
pub fn close(mask: &BinaryMask, se: &StructuringElement) -> BinaryMask {
    let m = se.reach();
    if m == 0 {
        return erode(&dilate(mask, se), se);
    }
    let [nz, ny, nx] = mask.dims;
    let pd = [nz + 2 * m, ny + 2 * m, nx + 2 * m];
    let mut padded = BinaryMask::empty(pd);
    for z in 0..nz {
        for y in 0..ny {
            let src = mask.index(z, y, 0);
            let dst = padded.index(z + m, y + m, m);
            padded.bits[dst..dst + nx].copy_from_slice(&mask.bits[src..src + nx]);
        }
    }
    let closed = erode(&dilate(&padded, se), se);
    let mut out = BinaryMask::empty(mask.dims);
    for z in 0..nz {
        for y in 0..ny {
            let src = closed.index(z + m, y + m, m);
            let dst = out.index(z, y, 0);
            out.bits[dst..dst + nx].copy_from_slice(&closed.bits[src..src + nx]);
        }
    }
    out
}
