//! One-to-one detection/ground-truth matching by descending overlap.

use std::cmp::Reverse;

use crate::error::{Error, Result};
use crate::postproc::{Detection, DetectionSet};

pub const MATCHING_RULE: &str = "greedy-overlap/gt-coverage>0.5";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchMode {
    ClassRequired,
    ClassAgnostic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchPair {
    pub det: usize,
    pub gt: usize,
    pub overlap: usize,
}

/// Shared voxel count of two sorted index lists.
pub fn overlap(a: &Detection, b: &Detection) -> usize {
    for ax in 0..3 {
        if a.bbox[ax + 3] < b.bbox[ax] || b.bbox[ax + 3] < a.bbox[ax] {
            return 0;
        }
    }
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.voxels.len() && j < b.voxels.len() {
        match a.voxels[i].cmp(&b.voxels[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn key(d: &Detection) -> (u8, usize) {
    (d.class, d.voxels.first().copied().unwrap_or(usize::MAX))
}

/// Candidate pairs cover more than half of the ground-truth object (and
/// share its class under [`MatchMode::ClassRequired`]). Pairs are taken
/// greedily by descending overlap, ties broken by the ground-truth then the
/// detection's `(class, first voxel)`, so the result does not depend on
/// input order.
pub fn match_detections(
    dets: &DetectionSet,
    gts: &DetectionSet,
    mode: MatchMode,
) -> Result<Vec<MatchPair>> {
    if dets.dims != gts.dims {
        return Err(Error::Shape(format!(
            "detections over {:?} vs ground truth over {:?}",
            dets.dims, gts.dims
        )));
    }
    let mut cands = Vec::new();
    for (gi, g) in gts.detections.iter().enumerate() {
        for (di, d) in dets.detections.iter().enumerate() {
            if mode == MatchMode::ClassRequired && d.class != g.class {
                continue;
            }
            let o = overlap(d, g);
            if 2 * o > g.voxels.len() {
                cands.push(MatchPair {
                    det: di,
                    gt: gi,
                    overlap: o,
                });
            }
        }
    }
    cands.sort_by_key(|m| {
        (
            Reverse(m.overlap),
            key(&gts.detections[m.gt]),
            key(&dets.detections[m.det]),
        )
    });
    let mut det_used = vec![false; dets.detections.len()];
    let mut gt_used = vec![false; gts.detections.len()];
    let mut out = Vec::new();
    for m in cands {
        if !det_used[m.det] && !gt_used[m.gt] {
            det_used[m.det] = true;
            gt_used[m.gt] = true;
            out.push(m);
        }
    }
    Ok(out)
}
