//! 3D convolution and transposed convolution kernels (im2col + GEMM).
//!
//! A transposed convolution is computed as the adjoint of the ordinary
//! convolution that maps its output grid back onto its input grid, so both
//! directions share one geometry type and one pair of gather/scatter loops.

use std::any::{Any, TypeId};
use std::cell::RefCell;
use std::collections::HashMap;

use super::scalar::{matmul, Scalar};
use crate::error::{Error, Result};

thread_local! {
    static SCRATCH: RefCell<HashMap<TypeId, Vec<Box<dyn Any>>>> = RefCell::new(HashMap::new());
}

/// Column buffer reused across calls on this thread; contents are stale.
fn take_scratch<T: Scalar>() -> Vec<T> {
    SCRATCH.with(|s| {
        s.borrow_mut()
            .get_mut(&TypeId::of::<T>())
            .and_then(|v| v.pop())
            .and_then(|b| b.downcast::<Vec<T>>().ok())
            .map(|b| *b)
            .unwrap_or_default()
    })
}

fn give_scratch<T: Scalar>(buf: Vec<T>) {
    SCRATCH.with(|s| {
        s.borrow_mut()
            .entry(TypeId::of::<T>())
            .or_default()
            .push(Box::new(buf));
    });
}

/// Column-buffer budget (elements) per chunk of output slices.
const COL_BUDGET: usize = 1 << 23;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(in_dims: [usize; 3], kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * padding;
            if padded < kernel || stride == 0 {
                return Err(Error::Shape(format!(
                    "conv kernel {kernel} stride {stride} does not fit dims {in_dims:?}"
                )));
            }
            out_dims[a] = (padded - kernel) / stride + 1;
        }
        Ok(ConvGeometry {
            in_dims,
            out_dims,
            kernel,
            stride,
            padding,
        })
    }

    /// Geometry of the convolution whose adjoint maps `small` onto `large`.
    pub fn transposed(
        small: [usize; 3],
        large: [usize; 3],
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = ConvGeometry::new(large, kernel, stride, padding)?;
        if g.out_dims != small {
            return Err(Error::Shape(format!(
                "transposed conv (k={kernel}, s={stride}, p={padding}) cannot map {small:?} to {large:?}"
            )));
        }
        Ok(g)
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn chunks(&self, rows: usize) -> impl Iterator<Item = (usize, usize)> {
        let slice = self.out_dims[1] * self.out_dims[2];
        let per = (COL_BUDGET / (rows * slice).max(1)).max(1);
        let depth = self.out_dims[0];
        (0..depth)
            .step_by(per)
            .map(move |z0| (z0, (z0 + per).min(depth)))
    }
}

/// Gathers input patches for output slices `z0..z1` into
/// `cols[(c, kz, ky, kx), position]`.
fn im2col<T: Scalar>(
    input: &[T],
    channels: usize,
    g: &ConvGeometry,
    z0: usize,
    z1: usize,
    cols: &mut [T],
) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = (z1 - z0) * ho * wo;
    for c in 0..channels {
        let chan = &input[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for (zi, oz) in (z0..z1).enumerate() {
                        let iz = (oz * s + kz) as isize - p;
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p;
                            let drow = &mut dst[(zi * ho + oy) * wo..(zi * ho + oy + 1) * wo];
                            if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                                drow.fill(T::zero());
                                continue;
                            }
                            let base = (iz as usize * h + iy as usize) * w;
                            let src = &chan[base..base + w];
                            if s == 1 {
                                let off = kx as isize - p;
                                let lo = (-off).max(0) as usize;
                                let hi = ((w as isize - off).min(wo as isize)).max(lo as isize) as usize;
                                drow[..lo].fill(T::zero());
                                drow[hi..].fill(T::zero());
                                let from = (lo as isize + off) as usize;
                                drow[lo..hi].copy_from_slice(&src[from..from + (hi - lo)]);
                            } else {
                                for (ox, v) in drow.iter_mut().enumerate() {
                                    let ix = (ox * s + kx) as isize - p;
                                    *v = if ix >= 0 && ix < w as isize {
                                        src[ix as usize]
                                    } else {
                                        T::zero()
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back onto the input grid.
fn col2im_add<T: Scalar>(
    cols: &[T],
    channels: usize,
    g: &ConvGeometry,
    z0: usize,
    z1: usize,
    out: &mut [T],
) {
    let [d, h, w] = g.in_dims;
    let [_, ho, wo] = g.out_dims;
    let (k, s, p) = (g.kernel, g.stride, g.padding as isize);
    let ncols = (z1 - z0) * ho * wo;
    for c in 0..channels {
        let chan = &mut out[c * d * h * w..(c + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let row = ((c * k + kz) * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for (zi, oz) in (z0..z1).enumerate() {
                        let iz = (oz * s + kz) as isize - p;
                        if iz < 0 || iz >= d as isize {
                            continue;
                        }
                        for oy in 0..ho {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let srow = &src[(zi * ho + oy) * wo..(zi * ho + oy + 1) * wo];
                            let base = (iz as usize * h + iy as usize) * w;
                            let dst = &mut chan[base..base + w];
                            for (ox, &v) in srow.iter().enumerate() {
                                let ix = (ox * s + kx) as isize - p;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `out[cout, out_len] = weight[cout, cin*k^3] * patches(input)` for one
/// batch item, then bias.
pub fn conv_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    cout: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out: &mut [T],
) {
    let out_len = g.out_len();
    if g.is_pointwise() {
        matmul(cout, cin, out_len, weight, input, out, false);
    } else {
        let rows = cin * g.kernel.pow(3);
        let mut cols = take_scratch::<T>();
        for (z0, z1) in g.chunks(rows) {
            let ncols = (z1 - z0) * g.out_dims[1] * g.out_dims[2];
            cols.resize(rows * ncols, T::zero());
            im2col(input, cin, g, z0, z1, &mut cols);
            let off = z0 * g.out_dims[1] * g.out_dims[2];
            T::gemm(
                cout,
                rows,
                ncols,
                T::one(),
                weight,
                rows as isize,
                1,
                &cols,
                ncols as isize,
                1,
                T::zero(),
                &mut out[off..],
                out_len as isize,
                1,
            );
        }
        give_scratch(cols);
    }
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(out_len).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
}

/// Accumulates weight/bias gradients and (optionally) writes the input
/// gradient for one batch item.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    cin: usize,
    cout: usize,
    weight: &[T],
    g: &ConvGeometry,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
    grad_input: Option<&mut [T]>,
) {
    let out_len = g.out_len();
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks(out_len).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let rows = cin * g.kernel.pow(3);
    if g.is_pointwise() {
        // dW += dY * X^T ; dX = W^T * dY
        T::gemm(
            cout,
            out_len,
            cin,
            T::one(),
            grad_out,
            out_len as isize,
            1,
            input,
            1,
            out_len as isize,
            T::one(),
            grad_weight,
            cin as isize,
            1,
        );
        if let Some(gi) = grad_input {
            T::gemm(
                cin,
                cout,
                out_len,
                T::one(),
                weight,
                1,
                cin as isize,
                grad_out,
                out_len as isize,
                1,
                T::zero(),
                gi,
                out_len as isize,
                1,
            );
        }
        return;
    }
    let mut grad_input = grad_input;
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(T::zero());
    }
    let mut cols = take_scratch::<T>();
    let mut dcols = take_scratch::<T>();
    for (z0, z1) in g.chunks(rows) {
        let ncols = (z1 - z0) * g.out_dims[1] * g.out_dims[2];
        let off = z0 * g.out_dims[1] * g.out_dims[2];
        cols.resize(rows * ncols, T::zero());
        im2col(input, cin, g, z0, z1, &mut cols);
        T::gemm(
            cout,
            ncols,
            rows,
            T::one(),
            &grad_out[off..],
            out_len as isize,
            1,
            &cols,
            1,
            ncols as isize,
            T::one(),
            grad_weight,
            rows as isize,
            1,
        );
        if let Some(gi) = grad_input.as_deref_mut() {
            dcols.resize(rows * ncols, T::zero());
            T::gemm(
                rows,
                cout,
                ncols,
                T::one(),
                weight,
                1,
                rows as isize,
                &grad_out[off..],
                out_len as isize,
                1,
                T::zero(),
                &mut dcols,
                ncols as isize,
                1,
            );
            col2im_add(&dcols, cin, g, z0, z1, gi);
        }
    }
    give_scratch(cols);
    give_scratch(dcols);
}

/// Transposed convolution forward for one batch item. `weight` is laid out
/// `[cin, cout, k, k, k]`; `g` maps the output grid (`g.in_dims`) onto the
/// input grid (`g.out_dims`).
pub fn deconv_forward<T: Scalar>(
    input: &[T],
    cin: usize,
    cout: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out: &mut [T],
) {
    let rows = cout * g.kernel.pow(3);
    let in_len = g.out_len();
    out.fill(T::zero());
    let mut cols = take_scratch::<T>();
    for (z0, z1) in g.chunks(rows) {
        let ncols = (z1 - z0) * g.out_dims[1] * g.out_dims[2];
        let off = z0 * g.out_dims[1] * g.out_dims[2];
        cols.resize(rows * ncols, T::zero());
        T::gemm(
            rows,
            cin,
            ncols,
            T::one(),
            weight,
            1,
            rows as isize,
            &input[off..],
            in_len as isize,
            1,
            T::zero(),
            &mut cols,
            ncols as isize,
            1,
        );
        col2im_add(&cols, cout, g, z0, z1, out);
    }
    give_scratch(cols);
    if let Some(b) = bias {
        let out_len = g.in_len();
        for (co, chunk) in out.chunks_mut(out_len).enumerate() {
            chunk.iter_mut().for_each(|v| *v += b[co]);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn deconv_backward<T: Scalar>(
    input: &[T],
    grad_out: &[T],
    cin: usize,
    cout: usize,
    weight: &[T],
    g: &ConvGeometry,
    grad_weight: &mut [T],
    grad_bias: Option<&mut [T]>,
    grad_input: Option<&mut [T]>,
) {
    let out_len = g.in_len();
    if let Some(gb) = grad_bias {
        for (co, chunk) in grad_out.chunks(out_len).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let rows = cout * g.kernel.pow(3);
    let in_len = g.out_len();
    let mut grad_input = grad_input;
    let mut cols = take_scratch::<T>();
    for (z0, z1) in g.chunks(rows) {
        let ncols = (z1 - z0) * g.out_dims[1] * g.out_dims[2];
        let off = z0 * g.out_dims[1] * g.out_dims[2];
        cols.resize(rows * ncols, T::zero());
        im2col(grad_out, cout, g, z0, z1, &mut cols);
        // dW[cin, rows] += X[cin, ncols] * cols^T
        T::gemm(
            cin,
            ncols,
            rows,
            T::one(),
            &input[off..],
            in_len as isize,
            1,
            &cols,
            1,
            ncols as isize,
            T::one(),
            grad_weight,
            rows as isize,
            1,
        );
        if let Some(gi) = grad_input.as_deref_mut() {
            T::gemm(
                cin,
                rows,
                ncols,
                T::one(),
                weight,
                rows as isize,
                1,
                &cols,
                ncols as isize,
                1,
                T::zero(),
                &mut gi[off..],
                in_len as isize,
                1,
            );
        }
    }
    give_scratch(cols);
}
