//! Whole-volume inference by overlapping sliding windows with mean score
//! fusion.

use super::graph::{NetInput, Network};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowConfig {
    pub window: [usize; 3],
    /// Fraction of the window shared by neighbouring tiles, in `[0, 1)`.
    pub overlap: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            window: [64, 96, 96],
            overlap: 0.5,
        }
    }
}

/// Tile start offsets along one axis: evenly strided, with the last tile
/// flush against the end.
pub fn tile_origins(dim: usize, window: usize, overlap: f64) -> Vec<usize> {
    if dim <= window {
        return vec![0];
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|&o| o + window < dim)
        .collect();
    out.push(dim - window);
    out
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Class scores for a single `[1, C, D, H, W]` volume. Axes shorter than the
/// window are padded with `pad` up to the network's spatial multiple.
pub fn infer_scores<T: Scalar>(
    net: &Network<T>,
    volume: &Tensor<T>,
    cfg: &WindowConfig,
    pad: T,
) -> Result<Tensor<T>> {
    let shape = volume.shape();
    if shape.len() != 5 || shape[0] != 1 {
        return Err(Error::Shape(format!("expected [1, C, D, H, W], got {shape:?}")));
    }
    if !(0.0..1.0).contains(&cfg.overlap) {
        return Err(Error::InvalidArgument(format!("overlap {} not in [0, 1)", cfg.overlap)));
    }
    let m = net.spec().spatial_multiple.max(1);
    if cfg.window.iter().any(|&w| w == 0 || w % m != 0) {
        return Err(Error::InvalidArgument(format!(
            "window {:?} must be a positive multiple of {m}",
            cfg.window
        )));
    }
    let c = shape[1];
    let dims = [shape[2], shape[3], shape[4]];
    let mut win = [0; 3];
    let mut padded = [0; 3];
    for a in 0..3 {
        win[a] = cfg.window[a].min(round_up(dims[a], m));
        padded[a] = dims[a].max(win[a]);
    }
    let classes = net.spec().classes;
    let vox = dims.iter().product::<usize>();
    let mut acc = vec![0.0f64; classes * vox];
    let mut hits = vec![0u32; vox];
    let origins: Vec<Vec<usize>> = (0..3)
        .map(|a| tile_origins(padded[a], win[a], cfg.overlap))
        .collect();
    let tile_len = win.iter().product::<usize>();
    for &oz in &origins[0] {
        for &oy in &origins[1] {
            for &ox in &origins[2] {
                let mut tile = vec![pad; c * tile_len];
                for ch in 0..c {
                    for z in 0..win[0] {
                        for y in 0..win[1] {
                            for x in 0..win[2] {
                                let (sz, sy, sx) = (oz + z, oy + y, ox + x);
                                if sz < dims[0] && sy < dims[1] && sx < dims[2] {
                                    tile[((ch * win[0] + z) * win[1] + y) * win[2] + x] = volume
                                        .data()[((ch * dims[0] + sz) * dims[1] + sy) * dims[2] + sx];
                                }
                            }
                        }
                    }
                }
                let input = Tensor::from_vec(&[1, c, win[0], win[1], win[2]], tile)?;
                let scores = net.predict(&NetInput::dense(input))?;
                for k in 0..classes {
                    for z in 0..win[0] {
                        for y in 0..win[1] {
                            for x in 0..win[2] {
                                let (sz, sy, sx) = (oz + z, oy + y, ox + x);
                                if sz < dims[0] && sy < dims[1] && sx < dims[2] {
                                    let v = (sz * dims[1] + sy) * dims[2] + sx;
                                    acc[k * vox + v] += scores.data()
                                        [((k * win[0] + z) * win[1] + y) * win[2] + x]
                                        .as_f64();
                                    if k == 0 {
                                        hits[v] += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let data = acc
        .iter()
        .enumerate()
        .map(|(i, &s)| T::from_f64_lossy(s / hits[i % vox] as f64))
        .collect();
    Tensor::from_vec(&[1, classes, dims[0], dims[1], dims[2]], data)
}
