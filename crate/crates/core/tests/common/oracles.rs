//! Independent reference implementations used by the oracle tests.

#![allow(dead_code)]

use ctscreen_core::nn::{LayerSpec, Layout, NetInput, Network, SpecBuilder, Tensor};
use ctscreen_core::postproc::{BinaryMask, Connectivity, Detection, DetectionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CONV_TOLERANCE: f64 = 1e-10;

/// Max-norm relative difference.
pub fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    diff / scale
}

pub struct ConvCase {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dims: [usize; 3],
    pub input: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

pub fn random_conv_case(seed: u64) -> ConvCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernel = [1, 2, 3][rng.random_range(0..3)];
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=kernel / 2 + 1).min(kernel);
    let dims = [0; 3].map(|_| rng.random_range(kernel.max(2)..=7));
    let (batch, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=4));
    let n = batch * cin * dims.iter().product::<usize>();
    ConvCase {
        batch,
        cin,
        cout,
        kernel,
        stride,
        padding,
        dims,
        input: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        weight: (0..cout * cin * kernel.pow(3)).map(|_| rng.random_range(-1.0..1.0)).collect(),
        bias: rng
            .random_bool(0.5)
            .then(|| (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect()),
    }
}

pub fn conv_out_dims(c: &ConvCase) -> [usize; 3] {
    c.dims.map(|d| (d + 2 * c.padding - c.kernel) / c.stride + 1)
}

/// Direct nested-loop cross-correlation, `[B, Cout, D', H', W']`.
pub fn naive_conv3d(c: &ConvCase) -> Vec<f64> {
    let [d, h, w] = c.dims;
    let [od, oh, ow] = conv_out_dims(c);
    let k = c.kernel;
    let mut out = vec![0.0; c.batch * c.cout * od * oh * ow];
    for b in 0..c.batch {
        for co in 0..c.cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = c.bias.as_ref().map_or(0.0, |bv| bv[co]);
                        for ci in 0..c.cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * c.stride + kz) as isize - c.padding as isize;
                                        let iy = (y * c.stride + ky) as isize - c.padding as isize;
                                        let ix = (x * c.stride + kx) as isize - c.padding as isize;
                                        if iz < 0 || iy < 0 || ix < 0 {
                                            continue;
                                        }
                                        let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                        if iz >= d || iy >= h || ix >= w {
                                            continue;
                                        }
                                        let xi = (((b * c.cin + ci) * d + iz) * h + iy) * w + ix;
                                        let wi = (((co * c.cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += c.input[xi] * c.weight[wi];
                                    }
                                }
                            }
                        }
                        out[(((b * c.cout + co) * od + z) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
    }
    out
}

/// The same case run through a one-layer network.
pub fn network_conv3d(c: &ConvCase) -> Vec<f64> {
    let mut b = SpecBuilder::new();
    let x = b.add(
        "input",
        LayerSpec::Input {
            channels: c.cin,
            layout: Layout::Dense,
        },
        &[],
    );
    b.add(
        "conv",
        LayerSpec::Conv3d {
            in_channels: c.cin,
            out_channels: c.cout,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.is_some(),
        },
        &[x],
    );
    let mut net = Network::<f64>::new(b.finish("conv", c.cout, 1), 0).unwrap();
    let k = c.kernel;
    let mut state = vec![(
        "conv.weight".to_string(),
        Tensor::from_vec(&[c.cout, c.cin, k, k, k], c.weight.clone()).unwrap(),
    )];
    if let Some(bias) = &c.bias {
        state.push(("conv.bias".into(), Tensor::from_vec(&[c.cout], bias.clone()).unwrap()));
    }
    net.load_state(&state).unwrap();
    let [d, h, w] = c.dims;
    let input = Tensor::from_vec(&[c.batch, c.cin, d, h, w], c.input.clone()).unwrap();
    net.predict(&NetInput::dense(input)).unwrap().into_data()
}

fn neighbour_offsets(conn: Connectivity) -> Vec<[i64; 3]> {
    let mut out = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let nonzero = (dz != 0) as u8 + (dy != 0) as u8 + (dx != 0) as u8;
                let ok = match conn {
                    Connectivity::Face => nonzero == 1,
                    Connectivity::Edge => (1..=2).contains(&nonzero),
                    Connectivity::Corner => nonzero >= 1,
                };
                if ok {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Stack-based flood fill from every unvisited foreground voxel in scan
/// order. Components are sorted internally and listed by first voxel.
pub fn flood_fill_components(mask: &BinaryMask, conn: Connectivity) -> Vec<Vec<usize>> {
    let [nz, ny, nx] = mask.dims;
    let offsets = neighbour_offsets(conn);
    let mut seen = vec![false; mask.bits.len()];
    let mut comps = Vec::new();
    for start in 0..mask.bits.len() {
        if !mask.bits[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(v) = stack.pop() {
            comp.push(v);
            let (z, y, x) = ((v / (ny * nx)) as i64, ((v / nx) % ny) as i64, (v % nx) as i64);
            for o in &offsets {
                let (a, b, c) = (z + o[0], y + o[1], x + o[2]);
                if a < 0 || b < 0 || c < 0 || a >= nz as i64 || b >= ny as i64 || c >= nx as i64 {
                    continue;
                }
                let u = ((a as usize) * ny + b as usize) * nx + c as usize;
                if mask.bits[u] && !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Random mask made of a sprinkling of voxels and small boxes, so that
/// components of many sizes and touching modes appear.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> BinaryMask {
    let n: usize = dims.iter().product();
    let p = rng.random_range(0.02..0.35);
    let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(p)).collect();
    for _ in 0..rng.random_range(0..6) {
        let lo: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..dims[a]));
        let size: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..6));
        let fill = rng.random_bool(0.7);
        for z in lo[0]..(lo[0] + size[0]).min(dims[0]) {
            for y in lo[1]..(lo[1] + size[1]).min(dims[1]) {
                for x in lo[2]..(lo[2] + size[2]).min(dims[2]) {
                    bits[(z * dims[1] + y) * dims[2] + x] = fill;
                }
            }
        }
    }
    BinaryMask::new(dims, bits).unwrap()
}

/// Random matching instance: up to 5 ground-truth boxes and up to 5
/// detections, many of them shifted copies of ground-truth boxes so that
/// coverage straddles the 50% threshold.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (DetectionSet, DetectionSet) {
    let dims = [10, 10, 10];
    let boxed = |rng: &mut ChaCha8Rng, class: u8, lo: [usize; 3], size: [usize; 3]| {
        let mut voxels = Vec::new();
        for z in lo[0]..(lo[0] + size[0]).min(dims[0]) {
            for y in lo[1]..(lo[1] + size[1]).min(dims[1]) {
                for x in lo[2]..(lo[2] + size[2]).min(dims[2]) {
                    if rng.random_bool(0.9) {
                        voxels.push((z * dims[1] + y) * dims[2] + x);
                    }
                }
            }
        }
        if voxels.is_empty() {
            voxels.push((lo[0] * dims[1] + lo[1]) * dims[2] + lo[2]);
        }
        Detection::from_voxels(class, voxels, dims, [1.0; 3])
    };
    let n_gt = rng.random_range(0..=5);
    let mut gts: Vec<Detection> = Vec::new();
    let mut boxes = Vec::new();
    for _ in 0..n_gt {
        let lo: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..8));
        let size: [usize; 3] = std::array::from_fn(|_| rng.random_range(2..5));
        let class = rng.random_range(1..=3);
        boxes.push((lo, size, class));
        gts.push(boxed(rng, class, lo, size));
    }
    // Ground-truth objects of one class must not overlap each other.
    dedup_overlaps(&mut gts);
    let n_det = rng.random_range(0..=5);
    let mut dets = Vec::new();
    for _ in 0..n_det {
        let (lo, size, class) = if !boxes.is_empty() && rng.random_bool(0.75) {
            let (lo, size, class) = boxes[rng.random_range(0..boxes.len())];
            let lo = lo.map(|v| (v as i64 + rng.random_range(-1..=1)).clamp(0, 9) as usize);
            let class = if rng.random_bool(0.7) { class } else { rng.random_range(1..=3) };
            (lo, size, class)
        } else {
            (
                std::array::from_fn(|_| rng.random_range(0..8)),
                std::array::from_fn(|_| rng.random_range(1..5)),
                rng.random_range(1..=3),
            )
        };
        dets.push(boxed(rng, class, lo, size));
    }
    dedup_overlaps(&mut dets);
    let set = |detections| DetectionSet {
        dims,
        spacing_mm: [1.0; 3],
        detections,
    };
    (set(dets), set(gts))
}

/// Removes voxels already claimed by an earlier object of the same class,
/// dropping objects left empty.
fn dedup_overlaps(objs: &mut Vec<Detection>) {
    let mut out: Vec<Detection> = Vec::new();
    for o in objs.drain(..) {
        let voxels: Vec<usize> = o
            .voxels
            .iter()
            .copied()
            .filter(|v| !out.iter().any(|p| p.class == o.class && p.voxels.binary_search(v).is_ok()))
            .collect();
        if !voxels.is_empty() {
            out.push(Detection::from_voxels(o.class, voxels, [10, 10, 10], [1.0; 3]));
        }
    }
    *objs = out;
}

pub fn brute_overlap(a: &Detection, b: &Detection) -> usize {
    a.voxels.iter().filter(|v| b.voxels.contains(v)).count()
}

/// Every valid one-to-one matching is enumerated; the chosen one is the
/// matching whose overlaps, sorted in descending order with the fixed
/// tie-break ranks, form the lexicographically greatest sequence (longer
/// wins on a shared prefix). Returns `(det, gt)` pairs sorted by gt.
pub fn brute_force_matching(dets: &DetectionSet, gts: &DetectionSet, class_required: bool) -> Vec<(usize, usize)> {
    let key = |d: &Detection| (d.class, d.voxels[0]);
    let mut cands: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, g) in gts.detections.iter().enumerate() {
        for (di, d) in dets.detections.iter().enumerate() {
            if class_required && d.class != g.class {
                continue;
            }
            let o = brute_overlap(d, g);
            if o * 2 > g.voxels.len() {
                cands.push((di, gi, o));
            }
        }
    }
    // Rank: better pairs compare smaller.
    let rank = |&(di, gi, o): &(usize, usize, usize)| {
        (
            std::cmp::Reverse(o),
            key(&gts.detections[gi]),
            key(&dets.detections[di]),
        )
    };
    let mut all = Vec::new();
    enumerate(&cands, gts.detections.len(), 0, &mut Vec::new(), &mut all);
    let mut best: Option<Vec<(usize, usize, usize)>> = None;
    for chosen in all {
        let mut seq = chosen;
        seq.sort_by_key(rank);
        let better = match &best {
            None => true,
            Some(b) => {
                let ord = seq
                    .iter()
                    .map(rank)
                    .zip(b.iter().map(rank))
                    .find_map(|(x, y)| (x != y).then(|| x < y));
                ord.unwrap_or(seq.len() > b.len())
            }
        };
        if better {
            best = Some(seq);
        }
    }
    let mut out: Vec<(usize, usize)> = best.unwrap_or_default().into_iter().map(|(d, g, _)| (d, g)).collect();
    out.sort_by_key(|p| p.1);
    out
}

/// All one-to-one matchings: each ground-truth object in turn takes no
/// detection or one unused candidate.
fn enumerate(
    cands: &[(usize, usize, usize)],
    n_gt: usize,
    gi: usize,
    current: &mut Vec<(usize, usize, usize)>,
    out: &mut Vec<Vec<(usize, usize, usize)>>,
) {
    if gi == n_gt {
        out.push(current.clone());
        return;
    }
    enumerate(cands, n_gt, gi + 1, current, out);
    for &c in cands.iter().filter(|c| c.1 == gi) {
        if current.iter().any(|p| p.0 == c.0) {
            continue;
        }
        current.push(c);
        enumerate(cands, n_gt, gi + 1, current, out);
        current.pop();
    }
}
