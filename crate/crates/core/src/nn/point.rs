//! Geometric kernels for the hierarchical point network: farthest-point
//! sampling, ball-query grouping and three-nearest-neighbour interpolation.

/// Point coordinates for a batch, `[batch][n][xyz]` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCoords {
    pub n: usize,
    pub xyz: Vec<f64>,
}

impl PointCoords {
    pub fn new(n: usize, xyz: Vec<f64>) -> Self {
        debug_assert!(n == 0 || xyz.len().is_multiple_of(3 * n));
        PointCoords { n, xyz }
    }

    pub fn batch(&self) -> usize {
        if self.n == 0 {
            0
        } else {
            self.xyz.len() / (3 * self.n)
        }
    }

    pub fn item(&self, b: usize) -> &[f64] {
        &self.xyz[b * 3 * self.n..(b + 1) * 3 * self.n]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Greedy farthest-point sampling starting from point 0. Ties go to the
/// lowest index.
pub fn farthest_point_sample(xyz: &[f64], npoint: usize) -> Vec<usize> {
    let n = xyz.len() / 3;
    let npoint = npoint.min(n);
    let mut chosen = Vec::with_capacity(npoint);
    if npoint == 0 {
        return chosen;
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..npoint {
        chosen.push(current);
        let c = &xyz[3 * current..3 * current + 3];
        let mut best = (f64::NEG_INFINITY, 0);
        for i in 0..n {
            let d = sq_dist(&xyz[3 * i..3 * i + 3], c);
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.0 {
                best = (dist[i], i);
            }
        }
        current = best.1;
    }
    chosen
}

/// For each centroid, the first `nsample` point indices (in index order)
/// within `radius`; short groups are padded with their first member.
pub fn ball_query(xyz: &[f64], centroids: &[usize], radius: f64, nsample: usize) -> Vec<usize> {
    let n = xyz.len() / 3;
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(centroids.len() * nsample);
    for &c in centroids {
        let cp = &xyz[3 * c..3 * c + 3];
        let start = out.len();
        for i in 0..n {
            if sq_dist(&xyz[3 * i..3 * i + 3], cp) <= r2 {
                out.push(i);
                if out.len() - start == nsample {
                    break;
                }
            }
        }
        let first = out.get(start).copied().unwrap_or(c);
        if out.len() == start {
            out.push(c);
        }
        out.resize(start + nsample, first);
    }
    out
}

/// Up to three nearest coarse points for every fine point, with normalised
/// inverse squared-distance weights.
pub fn three_nn(fine: &[f64], coarse: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let nf = fine.len() / 3;
    let nc = coarse.len() / 3;
    let k = nc.min(3);
    let mut idx = Vec::with_capacity(nf * 3);
    let mut wts = Vec::with_capacity(nf * 3);
    for i in 0..nf {
        let p = &fine[3 * i..3 * i + 3];
        let mut best = [(f64::INFINITY, 0usize); 3];
        for j in 0..nc {
            let d = sq_dist(p, &coarse[3 * j..3 * j + 3]);
            if d < best[k - 1].0 {
                let mut pos = k - 1;
                while pos > 0 && best[pos - 1].0 > d {
                    best[pos] = best[pos - 1];
                    pos -= 1;
                }
                best[pos] = (d, j);
            }
        }
        let recip: Vec<f64> = best[..k].iter().map(|&(d, _)| 1.0 / (d + 1e-8)).collect();
        let norm: f64 = recip.iter().sum();
        for slot in 0..3 {
            if slot < k {
                idx.push(best[slot].1);
                wts.push(recip[slot] / norm);
            } else {
                idx.push(best[0].1);
                wts.push(0.0);
            }
        }
    }
    (idx, wts)
}
